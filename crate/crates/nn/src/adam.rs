use serde::{Deserialize, Serialize};

use crate::network::NetworkParams;

/// Adam moments mirror the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: NetworkParams,
    pub v: NetworkParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` with learning rate `lr`.
pub fn adam_step(state: &mut AdamState, params: &mut NetworkParams, grads: &NetworkParams, lr: f64) {
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let layers = params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.m.layers.iter_mut().zip(state.v.layers.iter_mut()));
    for ((p, g), (m, v)) in layers {
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        ndarray::Zip::from(&mut p.w)
            .and(&g.w)
            .and(&mut m.w)
            .and(&mut v.w)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        ndarray::Zip::from(&mut p.b)
            .and(&g.b)
            .and(&mut m.b)
            .and(&mut v.b)
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
}
