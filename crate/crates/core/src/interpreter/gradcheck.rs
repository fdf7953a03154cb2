//! Finite-difference checking of training graphs.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{execute, reference, Bindings, Incremental, InterpError, TensorValue};
use crate::autodiff::{OptimizerSpec, TrainingGraph};
use crate::graph::{ComputationGraph, EdgeId, EdgeKind, LossKind, NodeId, OpKind};
use crate::Scalar;

pub const FD_STEP: f64 = 1e-5;
/// Coordinates sampled per parameter per trial.
const COORDS_PER_PARAM: usize = 2;
/// Attempts per coordinate before giving up on finding one away from a kink.
const KINK_RETRIES: usize = 25;
/// Gradient scale below which errors are measured absolutely. Some parameters
/// (a key bias under softmax) have an exactly zero gradient, where the ratio
/// would only measure finite-difference noise.
pub const GRAD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    pub param: EdgeId,
    /// Largest `|analytic - numeric|` over the sampled coordinates, divided by
    /// the largest gradient magnitude of the parameter or `GRAD_FLOOR`.
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Coordinates rejected because the perturbation flipped a ReLU.
    pub kinks_skipped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub trials: usize,
    pub params: Vec<ParamReport>,
    /// Parameters whose optimizer outputs differ from the scalar recurrences.
    pub optimizer_mismatches: Vec<EdgeId>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// Parameters whose error reaches `tol`, or that could not be checked.
    pub fn failures(&self, tol: f64) -> Vec<EdgeId> {
        self.params
            .iter()
            .filter(|p| !(p.max_rel_err < tol) || p.coords_checked == 0)
            .map(|p| p.param)
            .collect()
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.failures(tol).is_empty() && self.optimizer_mismatches.is_empty()
    }
}

fn unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let x: f64 = rng.gen_range(-1.0..1.0);
        if x.abs() > 1e-3 {
            return x;
        }
    }
}

/// Random values for every graph input: unit-scale inputs bounded away from
/// zero, fan-in scaled weights, scales near one, one-hot labels for
/// cross-entropy, and small non-negative optimizer states.
pub fn random_bindings<T: Scalar, R: Rng>(g: &ComputationGraph, rng: &mut R) -> Bindings<T> {
    let mut b = Bindings::new();
    for &e in &g.graph_inputs {
        let edge = g.edge(e);
        let n = edge.numel();
        let first_use = edge.consumers.first().map(|c| {
            let node = g.node(*c);
            (
                node.kind.clone(),
                node.inputs.iter().position(|i| *i == e).unwrap_or(0),
            )
        });
        let data: Vec<f64> = match edge.kind {
            EdgeKind::Weight => match first_use {
                Some((OpKind::Conv { .. }, 1)) => {
                    let fan_in: usize = edge.shape[1..].iter().product();
                    let s = (3.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| s * unit(rng)).collect()
                }
                Some((OpKind::Gemm, 1)) => {
                    let s = (3.0 / edge.shape[0] as f64).sqrt();
                    (0..n).map(|_| s * unit(rng)).collect()
                }
                Some((OpKind::Mul, 1)) => (0..n).map(|_| 1.0 + 0.2 * unit(rng)).collect(),
                Some((OpKind::Add, 1))
                | Some((OpKind::Gemm, 2))
                | Some((OpKind::Conv { .. }, 2)) => (0..n).map(|_| 0.1 * unit(rng)).collect(),
                _ => (0..n).map(|_| unit(rng)).collect(),
            },
            EdgeKind::Label
                if matches!(
                    first_use,
                    Some((
                        OpKind::Loss {
                            kind: LossKind::CrossEntropyWithSoftmax
                        },
                        _
                    ))
                ) =>
            {
                let classes = *edge.shape.last().unwrap();
                let mut d = vec![0.0; n];
                for row in d.chunks_mut(classes) {
                    row[rng.gen_range(0..classes)] = 1.0;
                }
                d
            }
            EdgeKind::OptimizerState => (0..n).map(|_| rng.gen_range(0.0..0.1)).collect(),
            _ => (0..n).map(|_| unit(rng)).collect(),
        };
        b.insert(
            e,
            TensorValue {
                shape: edge.shape.clone(),
                data: data.into_iter().map(T::lit).collect(),
            },
        );
    }
    b
}

fn ancestors(g: &ComputationGraph, e: EdgeId) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::new();
    let mut stack: Vec<NodeId> = g.edge(e).producer.into_iter().collect();
    while let Some(n) = stack.pop() {
        if seen.insert(n) {
            stack.extend(g.predecessors(n));
        }
    }
    seen
}

struct Perturber<'a, T> {
    inc: Incremental<'a, T>,
    loss: EdgeId,
    allowed: BTreeSet<NodeId>,
}

impl<'a, T: Scalar> Perturber<'a, T> {
    fn new(
        g: &'a ComputationGraph,
        base: &'a Bindings<T>,
        loss: EdgeId,
    ) -> Result<Self, InterpError> {
        Ok(Perturber {
            inc: Incremental::new(g, base)?,
            loss,
            allowed: ancestors(g, loss),
        })
    }

    /// Central difference at one coordinate; `None` if the two perturbed
    /// evaluations disagree on any ReLU activation pattern.
    fn central(
        &self,
        theta: EdgeId,
        nodes: &[NodeId],
        idx: usize,
        h: T,
    ) -> Result<Option<T>, InterpError> {
        let base = &self.inc.base[&theta];
        let eval = |delta: T| -> Result<Bindings<T>, InterpError> {
            let mut v = base.clone();
            v.data[idx] = v.data[idx] + delta;
            self.inc.run(Bindings::from([(theta, v)]), nodes)
        };
        let plus = eval(h)?;
        let minus = eval(-h)?;
        for &n in nodes {
            let node = self.inc.g.node(n);
            if node.kind == OpKind::ReLU {
                let (a, b) = (&plus[&node.outputs[0]], &minus[&node.outputs[0]]);
                let flipped = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .any(|(x, y)| (*x > T::zero()) != (*y > T::zero()));
                if flipped {
                    return Ok(None);
                }
            }
        }
        let lp = plus
            .get(&self.loss)
            .unwrap_or(&self.inc.base[&self.loss])
            .data[0];
        let lm = minus
            .get(&self.loss)
            .unwrap_or(&self.inc.base[&self.loss])
            .data[0];
        Ok(Some((lp - lm) / (h + h)))
    }
}

/// Central-difference gradient of the scalar `loss` with respect to every
/// element of `theta`.
pub fn finite_difference_grad<T: Scalar>(
    g: &ComputationGraph,
    loss: EdgeId,
    theta: EdgeId,
    bindings: &Bindings<T>,
    h: f64,
) -> Result<TensorValue<T>, InterpError> {
    let base = execute(g, bindings)?;
    let p = Perturber::new(g, &base, loss)?;
    let nodes = p.inc.downstream(theta, &p.allowed);
    let mut out = TensorValue::zeros(&g.edge(theta).shape);
    for i in 0..out.data.len() {
        let plus = {
            let mut v = base[&theta].clone();
            v.data[i] = v.data[i] + T::lit(h);
            p.inc.run(Bindings::from([(theta, v)]), &nodes)?
        };
        let minus = {
            let mut v = base[&theta].clone();
            v.data[i] = v.data[i] - T::lit(h);
            p.inc.run(Bindings::from([(theta, v)]), &nodes)?
        };
        let l = |m: &Bindings<T>| m.get(&loss).unwrap_or(&base[&loss]).data[0];
        out.data[i] = (l(&plus) - l(&minus)) / T::lit(2.0 * h);
    }
    Ok(out)
}

/// Checks the update node of `p` against the declared optimizer applied at
/// step 1 to the parameter, its recorded gradient and its state inputs.
fn optimizer_matches(tg: &TrainingGraph, values: &Bindings<f64>, p: EdgeId) -> bool {
    let Some(&nid) = tg.update_nodes.get(&p) else {
        return true;
    };
    let (Some(opt), Some(&grad_edge)) = (tg.optimizer, tg.param_grads.get(&p)) else {
        return false;
    };
    let node = tg.graph.node(nid);
    let states = &tg.state_edges[&p];
    let v = |e: EdgeId| &values[&e].data;
    let (theta, grad) = (v(p), v(grad_edge));
    let outs: Vec<&Vec<f64>> = node.outputs.iter().map(|o| v(*o)).collect();
    let same = |a: f64, b: f64| a.to_bits() == b.to_bits();
    match opt {
        OptimizerSpec::SgdMomentum { lr, momentum } => {
            let state = v(states[0]);
            outs.len() == 2
                && (0..theta.len()).all(|i| {
                    let (t, s) = reference::sgd_momentum(theta[i], grad[i], state[i], lr, momentum);
                    same(t, outs[0][i]) && same(s, outs[1][i])
                })
        }
        OptimizerSpec::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } => {
            let (m, vv) = (v(states[0]), v(states[1]));
            outs.len() == 3
                && (0..theta.len()).all(|i| {
                    let (t, mm, vn) =
                        reference::adam(theta[i], grad[i], m[i], vv[i], lr, beta1, beta2, eps, 1);
                    same(t, outs[0][i]) && same(mm, outs[1][i]) && same(vn, outs[2][i])
                })
        }
    }
}

/// Compares every parameter gradient of `tg` with central differences of the
/// loss on random data, and every optimizer output with the scalar recurrences.
pub fn check_training_graph(
    tg: &TrainingGraph,
    trials: usize,
    seed: u64,
) -> Result<GradReport, InterpError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports: Vec<ParamReport> = tg
        .params
        .iter()
        .map(|&p| ParamReport {
            param: p,
            max_rel_err: 0.0,
            coords_checked: 0,
            kinks_skipped: 0,
        })
        .collect();
    let mut mismatches = BTreeSet::new();
    let h = FD_STEP;
    for _ in 0..trials {
        let bindings = random_bindings::<f64, _>(&tg.graph, &mut rng);
        let values = execute(&tg.graph, &bindings)?;
        let pert = Perturber::new(&tg.graph, &values, tg.loss)?;
        for (rep, &p) in reports.iter_mut().zip(&tg.params) {
            if !optimizer_matches(tg, &values, p) {
                mismatches.insert(p);
            }
            let Some(grad_edge) = tg.param_grads.get(&p) else {
                continue;
            };
            let analytic = &values[grad_edge];
            let scale = analytic.max_abs();
            let nodes = pert.inc.downstream(p, &pert.allowed);
            let n = analytic.data.len();
            let want = COORDS_PER_PARAM.min(n);
            let mut candidates = sample(&mut rng, n, n.min(want * KINK_RETRIES)).into_vec();
            candidates.reverse();
            let mut done = 0;
            let mut worst: f64 = 0.0;
            let mut numeric_scale: f64 = 0.0;
            while done < want {
                let Some(idx) = candidates.pop() else { break };
                match pert.central(p, &nodes, idx, h)? {
                    Some(fd) => {
                        worst = worst.max((analytic.data[idx] - fd).abs());
                        numeric_scale = numeric_scale.max(fd.abs());
                        done += 1;
                    }
                    None => rep.kinks_skipped += 1,
                }
            }
            let denom = scale.max(numeric_scale).max(GRAD_FLOOR);
            rep.max_rel_err = rep.max_rel_err.max(worst / denom);
            rep.coords_checked += done;
        }
    }
    Ok(GradReport {
        trials,
        params: reports,
        optimizer_mismatches: mismatches.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{build_training_graph, LossSpec};
    use crate::graph::Phase;

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut g = ComputationGraph::default();
        let t = g.add_input(&[1], 8, EdgeKind::Weight);
        let y = g
            .add_node(OpKind::Mul, &[t, t], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        g.graph_outputs.push(y);
        let b = Bindings::from([(t, TensorValue::scalar(3.0f64))]);
        let d = finite_difference_grad(&g, y, t, &b, FD_STEP).unwrap();
        assert!((d.data[0] - 6.0).abs() < 1e-8);
    }

    /// Least squares: d/dθ mean((Xθ - y)^2) = 2 Xᵀ(Xθ - y) / n.
    #[test]
    fn least_squares_gradient_matches_closed_form() {
        let (n, k) = (5, 3);
        let mut fwd = ComputationGraph::default();
        let x = fwd.add_input(&[n, k], 8, EdgeKind::Input);
        let theta = fwd.add_input(&[k, 1], 8, EdgeKind::Weight);
        let p = fwd
            .add_node(
                OpKind::Gemm,
                &[x, theta],
                EdgeKind::Activation,
                Phase::Forward,
            )
            .unwrap();
        fwd.graph_outputs.push(p);
        let loss = LossSpec {
            kind: LossKind::MeanSquaredError,
            target: None,
        };
        let tg = build_training_graph(&fwd, loss, None).unwrap();
        let b = random_bindings::<f64, _>(&tg.graph, &mut ChaCha8Rng::seed_from_u64(3));
        let (xv, tv, yv) = (&b[&x].data, &b[&theta].data, &b[&tg.target].data);
        let mut closed = vec![0.0; k];
        for i in 0..n {
            let r: f64 = (0..k).map(|j| xv[i * k + j] * tv[j]).sum::<f64>() - yv[i];
            for j in 0..k {
                closed[j] += 2.0 * xv[i * k + j] * r / n as f64;
            }
        }
        let fd = finite_difference_grad(&tg.graph, tg.loss, theta, &b, FD_STEP).unwrap();
        let analytic = &execute(&tg.graph, &b).unwrap()[&tg.param_grads[&theta]];
        for j in 0..k {
            assert!((fd.data[j] - closed[j]).abs() < 1e-6);
            assert!((analytic.data[j] - closed[j]).abs() < 1e-12);
        }
    }

    fn two_layer() -> TrainingGraph {
        let mut fwd = ComputationGraph::default();
        let x = fwd.add_input(&[4, 4], 8, EdgeKind::Input);
        let w1 = fwd.add_input(&[4, 4], 8, EdgeKind::Weight);
        let h = fwd
            .add_node(OpKind::Gemm, &[x, w1], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        let a = fwd
            .add_node(OpKind::Gelu, &[h], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        let w2 = fwd.add_input(&[4, 3], 8, EdgeKind::Weight);
        let y = fwd
            .add_node(OpKind::Gemm, &[a, w2], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        fwd.graph_outputs.push(y);
        build_training_graph(&fwd, LossSpec::default(), Some(OptimizerSpec::adam())).unwrap()
    }

    #[test]
    fn correct_graph_passes() {
        let tg = two_layer();
        let r = check_training_graph(&tg, 3, 1).unwrap();
        assert!(r.passed(1e-6), "{r:?}");
    }

    #[test]
    fn missing_weight_transpose_is_flagged() {
        let mut tg = two_layer();
        let w1 = tg.params[0];
        let dw1 = tg.param_grads[&w1];
        let dw_node = tg.graph.edge(dw1).producer.unwrap();
        // dW = Xᵀ·dY becomes X·dY (square X keeps the shapes valid).
        let xt = tg.graph.node(dw_node).inputs[0];
        let x = tg.graph.node(tg.graph.edge(xt).producer.unwrap()).inputs[0];
        tg.graph.nodes.get_mut(&dw_node).unwrap().inputs[0] = x;
        tg.graph.relink();
        let r = check_training_graph(&tg, 1, 1).unwrap();
        assert_eq!(r.failures(1e-4), vec![w1]);
    }

    #[test]
    fn corrupted_optimizer_is_flagged() {
        let mut tg = two_layer();
        let p = tg.params[1];
        let n = tg.update_nodes[&p];
        if let OpKind::AdamUpdate { step, .. } = &mut tg.graph.nodes.get_mut(&n).unwrap().kind {
            *step = 2;
        }
        let r = check_training_graph(&tg, 1, 1).unwrap();
        assert_eq!(r.optimizer_mismatches, vec![p]);
    }
}
