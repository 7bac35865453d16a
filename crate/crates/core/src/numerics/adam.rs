use alloc::format;
use alloc::vec::Vec;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::dim(
            "adam_step",
            "parameter list",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, ((p, g), m)) in params.iter().zip(grads).zip(&state.m).enumerate() {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("parameter {i}"),
                format!("param {:?}, grad {:?}, state {:?}", p.shape(), g.shape(), m.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            let gk = gk.as_f64();
            let mk = cfg.beta1 * md[k].as_f64() + (1.0 - cfg.beta1) * gk;
            let vk = cfg.beta2 * vd[k].as_f64() + (1.0 - cfg.beta2) * gk * gk;
            md[k] = T::of_f64(mk);
            vd[k] = T::of_f64(vk);
            let update = cfg.lr * (mk / bc1) / (libm::sqrt(vk / bc2) + cfg.eps);
            pd[k] = T::of_f64(pd[k].as_f64() - update);
        }
    }
    Ok(())
}
