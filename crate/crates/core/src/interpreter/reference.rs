//! Scalar optimizer recurrences, written independently of the kernels and
//! used to check optimizer nodes bit for bit.

use crate::Scalar;

/// `v' = mu*v - lr*g`, `theta' = theta + v'`. Returns `(theta', v')`.
pub fn sgd_momentum<T: Scalar>(theta: T, g: T, v: T, lr: f64, momentum: f64) -> (T, T) {
    let v_next = T::lit(momentum) * v - T::lit(lr) * g;
    (theta + v_next, v_next)
}

/// Bias-corrected Adam step `t`. Returns `(theta', m', v')`.
#[allow(clippy::too_many_arguments)]
pub fn adam<T: Scalar>(
    theta: T,
    g: T,
    m: T,
    v: T,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) -> (T, T, T) {
    let b1 = T::lit(beta1);
    let b2 = T::lit(beta2);
    let m_next = b1 * m + (T::one() - b1) * g;
    let v_next = b2 * v + (T::one() - b2) * g * g;
    let m_hat = m_next / (T::one() - b1.powi(t as i32));
    let v_hat = v_next / (T::one() - b2.powi(t as i32));
    let theta_next = theta - T::lit(lr) * m_hat / (v_hat.sqrt() + T::lit(eps));
    (theta_next, m_next, v_next)
}
