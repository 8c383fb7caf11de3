//! Adam with bias correction. Moment state lives per parameter name, each
//! slot with its own step counter, so disjoint parameter groups (critics,
//! actors, the world model) can share one state object without coupling
//! their bias-correction schedules.

use super::graph::GradMap;
use super::tensor::{ParamStore, Tensor};
use super::NnError;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates and per-slot step counts.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    slots: BTreeMap<String, AdamSlot>,
}

#[derive(Clone, Debug)]
pub struct AdamSlot {
    pub t: u64,
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn slot(&self, name: &str) -> Option<&AdamSlot> {
        self.slots.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &AdamSlot)> {
        self.slots.iter()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub(crate) fn insert_slot(&mut self, name: String, slot: AdamSlot) {
        self.slots.insert(name, slot);
    }
}

/// One Adam step over every key in `grads`.
///
/// Parameters without a gradient entry are untouched; a gradient whose key
/// has no parameter is an error. Arithmetic runs in f64 and rounds back to
/// the f32 stores.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &GradMap,
    state: &mut AdamState,
    lr: f64,
    hp: AdamParams,
) -> Result<(), NnError> {
    for (name, grad) in grads {
        if !store.contains(name) {
            return Err(NnError::OrphanGradient(name.clone()));
        }
        let param = store.get_mut(name)?;
        if grad.numel() != param.numel() {
            return Err(NnError::GradientSize {
                name: name.clone(),
                got: grad.numel(),
                want: param.numel(),
            });
        }
        let slot = state.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
            t: 0,
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
        });
        slot.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(slot.t as i32);
        let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
        let p = param.data_mut();
        for i in 0..p.len() {
            let g = grad.data()[i] as f64;
            let mi = hp.beta1 * m[i] as f64 + (1.0 - hp.beta1) * g;
            let vi = hp.beta2 * v[i] as f64 + (1.0 - hp.beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let mh = mi / bc1;
            let vh = vi / bc2;
            p[i] = (p[i] as f64 - lr * mh / (vh.sqrt() + hp.eps)) as f32;
        }
    }
    Ok(())
}
