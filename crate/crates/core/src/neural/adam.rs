use super::params::{ParamId, ParamStore};
use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments for a group of parameters.
///
/// Only the parameters in the group are touched by [`AdamState::step`], so
/// separate losses can keep independent optimizers over disjoint groups.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    group: Vec<ParamId>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, group: Vec<ParamId>) -> Self {
        let zeros = |id: &ParamId| {
            let [r, c] = store.get(*id).shape();
            Tensor::zeros(r, c)
        };
        Self {
            first: group.iter().map(zeros).collect(),
            second: group.iter().map(zeros).collect(),
            group,
            step: 0,
        }
    }

    /// Optimizer over every parameter of the store.
    pub fn for_all(store: &ParamStore) -> Self {
        Self::new(store, store.ids().collect())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn group(&self) -> &[ParamId] {
        &self.group
    }

    /// One bias-corrected Adam update with the standard constants.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (slot, id) in self.group.iter().enumerate() {
            let g = grads.get(*id);
            if g.shape() != params.get(*id).shape() || g.shape() != self.first[slot].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {} is {:?}, gradient {:?}", params.name(*id), params.get(*id).shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (slot, id) in self.group.iter().enumerate() {
            let g = grads.get(*id).values();
            let m = self.first[slot].values_mut();
            let v = self.second[slot].values_mut();
            let p = params.get_mut(*id).values_mut();
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}
