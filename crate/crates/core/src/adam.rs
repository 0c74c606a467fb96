//! Bias-corrected Adam over a flat list of tensors.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper<F: Real> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

#[derive(Debug, Clone)]
pub struct AdamState<F: Real> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &[Tensor<F>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One in-place Adam update.
pub fn adam_step<F: Real>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    hyper: AdamHyper<F>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} params vs {} grads vs {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = F::from_f64_lit(state.t as f64);
    let bc1 = F::one() - hyper.beta1.powf(t);
    let bc2 = F::one() - hyper.beta2.powf(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for ((pk, &gk), (mk, vk)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()))
        {
            *mk = hyper.beta1 * *mk + (F::one() - hyper.beta1) * gk;
            *vk = hyper.beta2 * *vk + (F::one() - hyper.beta2) * gk * gk;
            let m_hat = *mk / bc1;
            let v_hat = *vk / bc2;
            *pk = *pk - hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
