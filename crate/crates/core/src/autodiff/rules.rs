use super::{AutodiffError, Backward};
use crate::graph::{EdgeId, OpKind, OperatorNode};

fn swap_last_two(rank: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..rank).collect();
    p.swap(rank - 1, rank - 2);
    p
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl Backward {
    fn shape(&self, e: EdgeId) -> Vec<usize> {
        self.g.edge(e).shape.clone()
    }

    /// Sums `g` down to `e`'s shape when `e` was broadcast in the forward op.
    fn unbroadcast(&mut self, g: EdgeId, e: EdgeId) -> Result<EdgeId, AutodiffError> {
        let target = self.shape(e);
        if self.shape(g) == target {
            Ok(g)
        } else {
            self.shaped(OpKind::ReduceSum, &[g], &target)
        }
    }
}

/// Emits the gradient primitives of `node` given the gradient `gy` of its
/// output, pushing one contribution per input flagged in `needs`.
pub(crate) fn backward_rule(
    bw: &mut Backward,
    node: &OperatorNode,
    gy: EdgeId,
    needs: &[bool],
) -> Result<(), AutodiffError> {
    let ins = &node.inputs;
    let y = node.outputs[0];
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    match &node.kind {
        OpKind::Conv { stride, pad } => {
            let (x, w) = (ins[0], ins[1]);
            if need(0) {
                let s = bw.shape(x);
                let dx = bw.shaped(
                    OpKind::ConvTranspose {
                        stride: *stride,
                        pad: *pad,
                    },
                    &[gy, w],
                    &s,
                )?;
                bw.push(x, dx);
            }
            if need(1) {
                let s = bw.shape(w);
                let dw = bw.shaped(
                    OpKind::ConvGradWeight {
                        stride: *stride,
                        pad: *pad,
                    },
                    &[x, gy],
                    &s,
                )?;
                bw.push(w, dw);
            }
            if ins.len() == 3 && need(2) {
                let db = bw.unbroadcast(gy, ins[2])?;
                bw.push(ins[2], db);
            }
        }
        OpKind::Gemm => {
            let (x, w) = (ins[0], ins[1]);
            if need(0) {
                let wt = bw.node(OpKind::Transpose { perm: vec![1, 0] }, &[w])?;
                let dx = bw.node(OpKind::Gemm, &[gy, wt])?;
                bw.push(x, dx);
            }
            if need(1) {
                let xt = bw.node(OpKind::Transpose { perm: vec![1, 0] }, &[x])?;
                let dw = bw.node(OpKind::Gemm, &[xt, gy])?;
                bw.push(w, dw);
            }
            if ins.len() == 3 && need(2) {
                let db = bw.unbroadcast(gy, ins[2])?;
                bw.push(ins[2], db);
            }
        }
        OpKind::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let perm = swap_last_two(bw.shape(a).len());
            if need(0) {
                let bt = bw.node(OpKind::Transpose { perm: perm.clone() }, &[b])?;
                let da = bw.node(OpKind::MatMul, &[gy, bt])?;
                bw.push(a, da);
            }
            if need(1) {
                let at = bw.node(OpKind::Transpose { perm }, &[a])?;
                let db = bw.node(OpKind::MatMul, &[at, gy])?;
                bw.push(b, db);
            }
        }
        OpKind::Add => {
            if need(0) {
                bw.push(ins[0], gy);
            }
            if need(1) {
                let db = bw.unbroadcast(gy, ins[1])?;
                bw.push(ins[1], db);
            }
        }
        OpKind::Sub => {
            if need(0) {
                bw.push(ins[0], gy);
            }
            if need(1) {
                let r = bw.unbroadcast(gy, ins[1])?;
                let db = bw.node(OpKind::Scale { factor: -1.0 }, &[r])?;
                bw.push(ins[1], db);
            }
        }
        OpKind::Mul => {
            let (a, b) = (ins[0], ins[1]);
            if need(0) {
                let da = bw.node(OpKind::Mul, &[gy, b])?;
                bw.push(a, da);
            }
            if need(1) {
                let p = bw.node(OpKind::Mul, &[gy, a])?;
                let db = bw.unbroadcast(p, b)?;
                bw.push(b, db);
            }
        }
        OpKind::Scale { factor } => {
            let dx = bw.node(OpKind::Scale { factor: *factor }, &[gy])?;
            bw.push(ins[0], dx);
        }
        OpKind::ReLU => {
            let dx = bw.node(OpKind::ReLUGrad, &[y, gy])?;
            bw.push(ins[0], dx);
        }
        OpKind::Gelu => {
            let dx = bw.node(OpKind::GeluGrad, &[ins[0], gy])?;
            bw.push(ins[0], dx);
        }
        OpKind::Softmax => {
            // dx = y * (dy - sum(dy * y))
            let mut rs = bw.shape(y);
            *rs.last_mut().unwrap() = 1;
            let t = bw.node(OpKind::Mul, &[gy, y])?;
            let s = bw.shaped(OpKind::ReduceSum, &[t], &rs)?;
            let u = bw.node(OpKind::Sub, &[gy, s])?;
            let dx = bw.node(OpKind::Mul, &[y, u])?;
            bw.push(ins[0], dx);
        }
        OpKind::CausalMask { .. } => {
            let dx = bw.node(OpKind::CausalMask { fill: 0.0 }, &[gy])?;
            bw.push(ins[0], dx);
        }
        OpKind::Rsqrt { .. } => {
            // d/dx (x + eps)^(-1/2) = -y^3 / 2
            let y2 = bw.node(OpKind::Mul, &[y, y])?;
            let y3 = bw.node(OpKind::Mul, &[y2, y])?;
            let t = bw.node(OpKind::Mul, &[y3, gy])?;
            let dx = bw.node(OpKind::Scale { factor: -0.5 }, &[t])?;
            bw.push(ins[0], dx);
        }
        OpKind::Transpose { perm } => {
            let dx = bw.node(
                OpKind::Transpose {
                    perm: inverse(perm),
                },
                &[gy],
            )?;
            bw.push(ins[0], dx);
        }
        OpKind::Reshape => {
            let s = bw.shape(ins[0]);
            let dx = bw.shaped(OpKind::Reshape, &[gy], &s)?;
            bw.push(ins[0], dx);
        }
        OpKind::ReduceSum => {
            let s = bw.shape(ins[0]);
            let dx = bw.shaped(OpKind::Expand, &[gy], &s)?;
            bw.push(ins[0], dx);
        }
        OpKind::Expand => {
            let dx = bw.unbroadcast(gy, ins[0])?;
            bw.push(ins[0], dx);
        }
        OpKind::Pool => {
            let s = bw.shape(ins[0]);
            let e = bw.shaped(OpKind::Expand, &[gy], &s)?;
            let dx = bw.node(
                OpKind::Scale {
                    factor: 1.0 / (s[2] * s[3]) as f64,
                },
                &[e],
            )?;
            bw.push(ins[0], dx);
        }
        k => return Err(AutodiffError::UnsupportedOperator(k.name().to_string())),
    }
    Ok(())
}
