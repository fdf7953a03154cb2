//! Direct-loop kernels, one per operator kind.

use super::{InterpError, TensorValue};
use crate::graph::{LossKind, OpKind};
use crate::Scalar;

/// Strides of `b` aligned to `out` for right-aligned broadcasting; a
/// broadcast dimension gets stride 0.
fn broadcast_strides(out: &[usize], b: &[usize]) -> Vec<usize> {
    let off = out.len() - b.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..b.len()).rev() {
        if b[i] != 1 {
            strides[off + i] = acc;
        }
        acc *= b[i];
    }
    strides
}

/// Calls `f(i, j)` for every flat index `i` of `out` and the flat index `j`
/// of the broadcast operand it reads.
fn for_each_broadcast(out: &[usize], b: &[usize], mut f: impl FnMut(usize, usize)) {
    let strides = broadcast_strides(out, b);
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut j = 0usize;
    for i in 0..n {
        f(i, j);
        for d in (0..rank).rev() {
            idx[d] += 1;
            j += strides[d];
            if idx[d] < out[d] {
                break;
            }
            j -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn binary<T: Scalar>(
    a: &TensorValue<T>,
    b: &TensorValue<T>,
    op: impl Fn(T, T) -> T,
) -> TensorValue<T> {
    let mut out = TensorValue::zeros(&a.shape);
    if a.shape == b.shape {
        for ((o, &x), &y) in out.data.iter_mut().zip(&a.data).zip(&b.data) {
            *o = op(x, y);
        }
    } else {
        for_each_broadcast(&a.shape, &b.shape, |i, j| {
            out.data[i] = op(a.data[i], b.data[j])
        });
    }
    out
}

fn unary<T: Scalar>(a: &TensorValue<T>, op: impl Fn(T) -> T) -> TensorValue<T> {
    TensorValue {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| op(x)).collect(),
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::lit(3.0) * k * x * x);
    (y, dy)
}

pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_parts(x).0
}

pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    gelu_parts(x).1
}

fn softmax_rows<T: Scalar>(x: &TensorValue<T>) -> TensorValue<T> {
    let n = *x.shape.last().unwrap();
    let mut out = x.clone();
    for row in out.data.chunks_mut(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    out
}

/// Output positions `o < n_out` whose input `o * stride + f - pad` lies in `0..n_in`.
fn valid_range(
    n_out: usize,
    n_in: usize,
    stride: usize,
    f: usize,
    pad: usize,
) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(f).div_ceil(stride);
    let hi = (n_in + pad).saturating_sub(f).div_ceil(stride).min(n_out);
    lo..hi.max(lo)
}

/// Calls `f(y_row, x_row)` for every output row touched by filter tap
/// `(dy, dx)` of one (output channel, input channel) plane, as the
/// contiguous output span and the strided input span it reads.
#[inline]
fn for_each_tap_row(
    (h, wd): (usize, usize),
    (oy, ox): (usize, usize),
    (dy, dx): (usize, usize),
    stride: usize,
    pad: usize,
    mut f: impl FnMut(std::ops::Range<usize>, usize),
) {
    let cols = valid_range(ox, wd, stride, dx, pad);
    if cols.is_empty() {
        return;
    }
    for oyi in valid_range(oy, h, stride, dy, pad) {
        let xrow = (oyi * stride + dy - pad) * wd;
        let yrow = oyi * ox;
        f(
            yrow + cols.start..yrow + cols.end,
            xrow + cols.start * stride + dx - pad,
        );
    }
}

fn conv<T: Scalar>(
    x: &TensorValue<T>,
    w: &TensorValue<T>,
    out_shape: &[usize],
    stride: usize,
    pad: usize,
) -> TensorValue<T> {
    let (b, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (k, fy, fx) = (w.shape[0], w.shape[2], w.shape[3]);
    let (oy, ox) = (out_shape[2], out_shape[3]);
    let mut y = TensorValue::zeros(out_shape);
    for bi in 0..b {
        for ki in 0..k {
            let yp = &mut y.data[(bi * k + ki) * oy * ox..][..oy * ox];
            for ci in 0..c {
                let xp = &x.data[(bi * c + ci) * h * wd..][..h * wd];
                for dy in 0..fy {
                    for dx in 0..fx {
                        let wv = w.data[((ki * c + ci) * fy + dy) * fx + dx];
                        for_each_tap_row((h, wd), (oy, ox), (dy, dx), stride, pad, |o, i| {
                            for (yv, &xv) in yp[o].iter_mut().zip(xp[i..].iter().step_by(stride)) {
                                *yv = *yv + wv * xv;
                            }
                        });
                    }
                }
            }
        }
    }
    y
}

fn conv_transpose<T: Scalar>(
    dy: &TensorValue<T>,
    w: &TensorValue<T>,
    out_shape: &[usize],
    stride: usize,
    pad: usize,
) -> TensorValue<T> {
    let (b, k, oy, ox) = (dy.shape[0], dy.shape[1], dy.shape[2], dy.shape[3]);
    let (c, fy, fx) = (w.shape[1], w.shape[2], w.shape[3]);
    let (h, wd) = (out_shape[2], out_shape[3]);
    let mut dx = TensorValue::zeros(out_shape);
    for bi in 0..b {
        for ki in 0..k {
            let gp = &dy.data[(bi * k + ki) * oy * ox..][..oy * ox];
            for ci in 0..c {
                let xp = &mut dx.data[(bi * c + ci) * h * wd..][..h * wd];
                for fyi in 0..fy {
                    for fxi in 0..fx {
                        let wv = w.data[((ki * c + ci) * fy + fyi) * fx + fxi];
                        for_each_tap_row((h, wd), (oy, ox), (fyi, fxi), stride, pad, |o, i| {
                            for (xv, &gv) in xp[i..].iter_mut().step_by(stride).zip(&gp[o]) {
                                *xv = *xv + wv * gv;
                            }
                        });
                    }
                }
            }
        }
    }
    dx
}

fn conv_grad_weight<T: Scalar>(
    x: &TensorValue<T>,
    dy: &TensorValue<T>,
    out_shape: &[usize],
    stride: usize,
    pad: usize,
) -> TensorValue<T> {
    let (b, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (k, oy, ox) = (dy.shape[1], dy.shape[2], dy.shape[3]);
    let (fy, fx) = (out_shape[2], out_shape[3]);
    let mut dw = TensorValue::zeros(out_shape);
    for ki in 0..k {
        for ci in 0..c {
            for fyi in 0..fy {
                for fxi in 0..fx {
                    let mut acc = T::zero();
                    for bi in 0..b {
                        let xp = &x.data[(bi * c + ci) * h * wd..][..h * wd];
                        let gp = &dy.data[(bi * k + ki) * oy * ox..][..oy * ox];
                        for_each_tap_row((h, wd), (oy, ox), (fyi, fxi), stride, pad, |o, i| {
                            for (&xv, &gv) in xp[i..].iter().step_by(stride).zip(&gp[o]) {
                                acc = acc + xv * gv;
                            }
                        });
                    }
                    dw.data[((ki * c + ci) * fy + fyi) * fx + fxi] = acc;
                }
            }
        }
    }
    dw
}

/// `(batch, m, k) x (batch, k, n)` on flat buffers.
fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    for bi in 0..batch {
        let (ab, bb, ob) = (bi * m * k, bi * k * n, bi * m * n);
        for i in 0..m {
            let orow = &mut out[ob + i * n..ob + (i + 1) * n];
            for p in 0..k {
                let av = a[ab + i * k + p];
                let brow = &b[bb + p * n..bb + (p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }
}

fn transpose<T: Scalar>(x: &TensorValue<T>, perm: &[usize]) -> TensorValue<T> {
    let rank = x.shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * x.shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = TensorValue::zeros(&out_shape);
    let mut idx = vec![0usize; rank];
    let mut j = 0usize;
    for i in 0..out.data.len() {
        out.data[i] = x.data[j];
        for d in (0..rank).rev() {
            idx[d] += 1;
            j += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            j -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Cross-entropy of softmax(pred) against `target`, averaged over rows.
fn cross_entropy<T: Scalar>(pred: &TensorValue<T>, target: &TensorValue<T>) -> T {
    let n = *pred.shape.last().unwrap();
    let rows = pred.data.len() / n;
    let mut total = T::zero();
    for (p, t) in pred.data.chunks(n).zip(target.data.chunks(n)) {
        let m = p.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + p.iter().fold(T::zero(), |s, &v| s + (v - m).exp()).ln();
        for (&pv, &tv) in p.iter().zip(t) {
            total = total + tv * (lse - pv);
        }
    }
    total / T::lit(rows as f64)
}

pub fn eval<T: Scalar>(
    kind: &OpKind,
    ins: &[&TensorValue<T>],
    out_shapes: &[Vec<usize>],
) -> Result<Vec<TensorValue<T>>, InterpError> {
    let one = vec![];
    let out0 = out_shapes.first().unwrap_or(&one);
    let single = |t: TensorValue<T>| Ok(vec![t]);
    match kind {
        OpKind::Conv { stride, pad } => {
            let mut y = conv(ins[0], ins[1], out0, *stride, *pad);
            if let Some(bias) = ins.get(2) {
                let plane = out0[2] * out0[3];
                for (i, v) in y.data.iter_mut().enumerate() {
                    *v = *v + bias.data[(i / plane) % out0[1]];
                }
            }
            single(y)
        }
        OpKind::ConvTranspose { stride, pad } => {
            single(conv_transpose(ins[0], ins[1], out0, *stride, *pad))
        }
        OpKind::ConvGradWeight { stride, pad } => {
            single(conv_grad_weight(ins[0], ins[1], out0, *stride, *pad))
        }
        OpKind::Gemm => {
            let (m, k, n) = (ins[0].shape[0], ins[0].shape[1], ins[1].shape[1]);
            let mut y = TensorValue::zeros(out0);
            matmul_into(&ins[0].data, &ins[1].data, &mut y.data, 1, m, k, n);
            if let Some(bias) = ins.get(2) {
                for row in y.data.chunks_mut(n) {
                    for (v, &bv) in row.iter_mut().zip(&bias.data) {
                        *v = *v + bv;
                    }
                }
            }
            single(y)
        }
        OpKind::MatMul => {
            let r = ins[0].shape.len();
            let (m, k, n) = (
                ins[0].shape[r - 2],
                ins[0].shape[r - 1],
                ins[1].shape[r - 1],
            );
            let batch = ins[0].shape[..r - 2].iter().product();
            let mut y = TensorValue::zeros(out0);
            matmul_into(&ins[0].data, &ins[1].data, &mut y.data, batch, m, k, n);
            single(y)
        }
        OpKind::Add => single(binary(ins[0], ins[1], |a, b| a + b)),
        OpKind::Sub => single(binary(ins[0], ins[1], |a, b| a - b)),
        OpKind::Mul => single(binary(ins[0], ins[1], |a, b| a * b)),
        OpKind::Scale { factor } => {
            let f = T::lit(*factor);
            single(unary(ins[0], |x| x * f))
        }
        OpKind::ReLU => single(unary(ins[0], |x| if x > T::zero() { x } else { T::zero() })),
        OpKind::ReLUGrad => single(binary(ins[0], ins[1], |y, dy| {
            if y > T::zero() {
                dy
            } else {
                T::zero()
            }
        })),
        OpKind::Gelu => single(unary(ins[0], gelu)),
        OpKind::GeluGrad => single(binary(ins[0], ins[1], |x, dy| gelu_derivative(x) * dy)),
        OpKind::Softmax => single(softmax_rows(ins[0])),
        OpKind::CausalMask { fill } => {
            let r = ins[0].shape.len();
            let (rows, cols) = (ins[0].shape[r - 2], ins[0].shape[r - 1]);
            let f = T::lit(*fill);
            let mut y = ins[0].clone();
            for (i, v) in y.data.iter_mut().enumerate() {
                if (i % cols) > (i / cols) % rows {
                    *v = f;
                }
            }
            single(y)
        }
        OpKind::Rsqrt { eps } => {
            let e = T::lit(*eps);
            single(unary(ins[0], |x| T::one() / (x + e).sqrt()))
        }
        OpKind::Transpose { perm } => single(transpose(ins[0], perm)),
        OpKind::Reshape => single(TensorValue {
            shape: out0.clone(),
            data: ins[0].data.clone(),
        }),
        OpKind::ReduceSum => {
            let mut y = TensorValue::zeros(out0);
            for_each_broadcast(&ins[0].shape, out0, |i, j| {
                y.data[j] = y.data[j] + ins[0].data[i]
            });
            single(y)
        }
        OpKind::Expand => {
            let mut y = TensorValue::zeros(out0);
            for_each_broadcast(out0, &ins[0].shape, |i, j| y.data[i] = ins[0].data[j]);
            single(y)
        }
        OpKind::Pool => {
            let plane = ins[0].shape[2] * ins[0].shape[3];
            let inv = T::lit(1.0 / plane as f64);
            single(TensorValue {
                shape: out0.clone(),
                data: ins[0]
                    .data
                    .chunks(plane)
                    .map(|c| c.iter().fold(T::zero(), |s, &v| s + v) * inv)
                    .collect(),
            })
        }
        OpKind::Loss { kind } => {
            let v = match kind {
                LossKind::CrossEntropyWithSoftmax => cross_entropy(ins[0], ins[1]),
                LossKind::MeanSquaredError => {
                    let n = T::lit(ins[0].data.len() as f64);
                    ins[0]
                        .data
                        .iter()
                        .zip(&ins[1].data)
                        .fold(T::zero(), |s, (&p, &t)| s + (p - t) * (p - t))
                        / n
                }
            };
            single(TensorValue {
                shape: vec![1],
                data: vec![v],
            })
        }
        OpKind::LossGrad { kind } => match kind {
            LossKind::CrossEntropyWithSoftmax => {
                let n = *ins[0].shape.last().unwrap();
                let rows = T::lit((ins[0].data.len() / n) as f64);
                let mut g = softmax_rows(ins[0]);
                for (gr, tr) in g.data.chunks_mut(n).zip(ins[1].data.chunks(n)) {
                    let tsum = tr.iter().fold(T::zero(), |s, &v| s + v);
                    for (gv, &tv) in gr.iter_mut().zip(tr) {
                        *gv = (*gv * tsum - tv) / rows;
                    }
                }
                single(g)
            }
            LossKind::MeanSquaredError => {
                let scale = T::lit(2.0 / ins[0].data.len() as f64);
                single(binary(ins[0], ins[1], |p, t| (p - t) * scale))
            }
        },
        OpKind::SgdUpdate { lr, momentum } => {
            let (lr, mu) = (T::lit(*lr), T::lit(*momentum));
            let (theta, g, v) = (ins[0], ins[1], ins[2]);
            let mut v_new = v.clone();
            let mut t_new = theta.clone();
            for i in 0..theta.data.len() {
                v_new.data[i] = mu * v.data[i] - lr * g.data[i];
                t_new.data[i] = theta.data[i] + v_new.data[i];
            }
            Ok(vec![t_new, v_new])
        }
        OpKind::AdamUpdate {
            lr,
            beta1,
            beta2,
            eps,
            step,
        } => {
            let (lr, b1, b2, eps) = (T::lit(*lr), T::lit(*beta1), T::lit(*beta2), T::lit(*eps));
            let one = T::one();
            let c1 = one - b1.powi(*step as i32);
            let c2 = one - b2.powi(*step as i32);
            let (theta, g, m, v) = (ins[0], ins[1], ins[2], ins[3]);
            let (mut t_new, mut m_new, mut v_new) = (theta.clone(), m.clone(), v.clone());
            for i in 0..theta.data.len() {
                let gi = g.data[i];
                m_new.data[i] = b1 * m.data[i] + (one - b1) * gi;
                v_new.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
                let m_hat = m_new.data[i] / c1;
                let v_hat = v_new.data[i] / c2;
                t_new.data[i] = theta.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            Ok(vec![t_new, m_new, v_new])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(shape: &[usize], data: &[f64]) -> TensorValue<f64> {
        TensorValue::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_add_over_channels() {
        let a = tv(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = tv(&[2, 1, 1], &[10.0, 20.0]);
        let y = &eval(&OpKind::Add, &[&a, &b], std::slice::from_ref(&a.shape)).unwrap()[0];
        assert_eq!(y.data, vec![11.0, 12.0, 23.0, 24.0]);
    }

    #[test]
    fn reduce_sum_inverts_expand_shape() {
        let a = tv(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = &eval(&OpKind::ReduceSum, &[&a], &[vec![3]]).unwrap()[0];
        assert_eq!(r.data, vec![5.0, 7.0, 9.0]);
        let c = &eval(&OpKind::ReduceSum, &[&a], &[vec![2, 1]]).unwrap()[0];
        assert_eq!(c.data, vec![6.0, 15.0]);
        let e = &eval(&OpKind::Expand, &[c], &[vec![2, 3]]).unwrap()[0];
        assert_eq!(e.data, vec![6.0, 6.0, 6.0, 15.0, 15.0, 15.0]);
    }

    #[test]
    fn transpose_swaps_axes() {
        let a = tv(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = &eval(
            &OpKind::Transpose { perm: vec![1, 0] },
            &[&a],
            &[vec![3, 2]],
        )
        .unwrap()[0];
        assert_eq!(t.data, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn causal_mask_fills_upper_triangle() {
        let a = tv(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = &eval(&OpKind::CausalMask { fill: -9.0 }, &[&a], &[vec![1, 2, 2]]).unwrap()[0];
        assert_eq!(y.data, vec![1.0, -9.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), dy> == <x, conv_transpose(dy)>
        let x = tv(
            &[1, 2, 5, 5],
            &(0..50).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(),
        );
        let w = tv(
            &[3, 2, 3, 3],
            &(0..54).map(|i| (i as f64 * 0.11).cos()).collect::<Vec<_>>(),
        );
        let y = conv(&x, &w, &[1, 3, 3, 3], 2, 1);
        let dy = tv(
            &[1, 3, 3, 3],
            &(0..27).map(|i| (i as f64 * 0.53).sin()).collect::<Vec<_>>(),
        );
        let dx = conv_transpose(&dy, &w, &[1, 2, 5, 5], 2, 1);
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let dw = conv_grad_weight(&x, &dy, &[3, 2, 3, 3], 2, 1);
        let rhs_w: f64 = w.data.iter().zip(&dw.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-12);
    }
}
