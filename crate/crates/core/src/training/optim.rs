//! AdamW with decoupled weight decay, and an exponential moving average of
//! selected parameters.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments, one pair per optimized parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub moments: BTreeMap<ParamId, (Tensor, Tensor)>,
    /// Completed steps.
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, ids: &[ParamId]) -> Self {
        let moments = ids
            .iter()
            .map(|&id| {
                let shape = store.get(id).shape().to_vec();
                (id, (Tensor::zeros(shape.clone()), Tensor::zeros(shape)))
            })
            .collect();
        Self { moments, t: 0 }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.moments.keys().copied().collect()
    }
}

/// One AdamW update of a single tensor at step `t >= 1`.
pub fn adamw_update(value: &mut Tensor, grad: &Tensor, m: &mut Tensor, v: &mut Tensor, h: &AdamHyper, t: u64) {
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    let decay = 1.0 - h.lr * h.weight_decay;
    let (p, m, v) = (value.data_mut(), m.data_mut(), v.data_mut());
    for i in 0..p.len() {
        let g = grad.data()[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + h.eps);
        p[i] = p[i] * decay - h.lr * step;
    }
}

/// Applies AdamW to every parameter tracked by `state`. Every tracked
/// parameter must have a gradient; a non-finite one aborts before any
/// update is written.
pub fn adamw_step(store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>, state: &mut AdamState, h: &AdamHyper) -> Result<()> {
    for (&id, g) in grads {
        if !state.moments.contains_key(&id) {
            return Err(Error::Config(format!("gradient for untracked parameter {}", store.entry(id).name)));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.entry(id).name)));
        }
        if g.shape() != store.get(id).shape() {
            return Err(Error::Config(format!("gradient shape {:?} for {}", g.shape(), store.entry(id).name)));
        }
    }
    state.t += 1;
    let t = state.t;
    for (id, (m, v)) in state.moments.iter_mut() {
        let grad = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(*id).shape().to_vec()));
        adamw_update(store.get_mut(*id), &grad, m, v, h, t);
    }
    Ok(())
}

/// Shadow copies of a fixed parameter subset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmaState {
    pub shadow: BTreeMap<ParamId, Tensor>,
}

impl EmaState {
    pub fn new(store: &ParamStore, ids: &[ParamId]) -> Self {
        Self { shadow: ids.iter().map(|&id| (id, store.get(id).clone())).collect() }
    }

    /// `shadow <- decay·shadow + (1-decay)·live`.
    pub fn update(&mut self, store: &ParamStore, decay: f64) {
        for (id, s) in self.shadow.iter_mut() {
            let live = store.get(*id);
            for (a, &b) in s.data_mut().iter_mut().zip(live.data()) {
                *a = decay * *a + (1.0 - decay) * b;
            }
        }
    }

    /// Copy of `store` with shadowed parameters replaced.
    pub fn apply_to(&self, store: &ParamStore) -> ParamStore {
        let mut out = store.clone();
        for (id, s) in &self.shadow {
            *out.get_mut(*id) = s.clone();
        }
        out
    }
}
