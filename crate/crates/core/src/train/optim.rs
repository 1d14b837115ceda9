use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{FreezePlan, ParamStore};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Moments exist only for parameters that were trainable at creation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, plan: &FreezePlan) -> Self {
        let moments = store
            .iter()
            .filter(|(_, p)| plan.is_trainable(p.group))
            .map(|(_, p)| {
                let n = p.value.numel();
                (
                    p.name.clone(),
                    Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                )
            })
            .collect();
        Self { t: 0, moments }
    }
}

/// One decoupled-weight-decay Adam update from the gradients held in `store`.
///
/// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ`. Parameters without moments are left
/// untouched.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState, hp: &AdamW, lr: f64) -> Result<()> {
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (_, p) in store.iter_mut() {
        let Some(mom) = state.moments.get_mut(&p.name) else {
            continue;
        };
        if mom.m.len() != p.grad.len() {
            return Err(CoreError::Contract(format!("optimizer moments for {} have the wrong size", p.name)));
        }
        for (k, theta) in p.value.data_mut().iter_mut().enumerate() {
            let g = p.grad[k];
            mom.m[k] = hp.beta1 * mom.m[k] + (1.0 - hp.beta1) * g;
            mom.v[k] = hp.beta2 * mom.v[k] + (1.0 - hp.beta2) * g * g;
            let m_hat = mom.m[k] / c1;
            let v_hat = mom.v[k] / c2;
            let decay = lr * hp.weight_decay * *theta;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + hp.eps) - decay;
        }
    }
    Ok(())
}
