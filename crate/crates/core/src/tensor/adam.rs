use serde::{Deserialize, Serialize};

use super::{Grads, Group, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over the trainable parameters of one group.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub group: Group,
    /// Number of updates applied so far.
    pub t: u64,
    pub slots: Vec<Moments<T>>,
}

#[derive(Debug, Clone)]
pub struct Moments<T> {
    pub param: ParamId,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, group: Group, config: AdamConfig) -> Self {
        let slots = store
            .iter()
            .filter(|(_, p)| p.group == group && p.trainable)
            .map(|(id, p)| Moments {
                param: id,
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            })
            .collect();
        AdamState {
            config,
            group,
            t: 0,
            slots,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        for slot in &self.slots {
            if grads.get(slot.param).shape() != store.get(slot.param).shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient for {} misaligned", store.param(slot.param).name),
                ));
            }
        }
        self.t += 1;
        for slot in &mut self.slots {
            adam_update(
                store.get_mut(slot.param).data_mut(),
                grads.get(slot.param).data(),
                slot.m.data_mut(),
                slot.v.data_mut(),
                self.t,
                &self.config,
            );
        }
        Ok(())
    }
}

/// One Adam update of `param` in place; `t` is the 1-based step number.
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    cfg: &AdamConfig,
) {
    let b1 = T::c(cfg.beta1);
    let b2 = T::c(cfg.beta2);
    let c1 = T::c(1.0 / (1.0 - cfg.beta1.powi(t as i32)));
    let c2 = T::c(1.0 / (1.0 - cfg.beta2.powi(t as i32)));
    let lr = T::c(cfg.lr);
    let eps = T::c(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mhat = m[i] * c1;
        let vhat = v[i] * c2;
        param[i] = param[i] - lr * mhat / (vhat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("qrn.w", Tensor::vector(vec![value]));
        (store, id)
    }

    fn grads_of(store: &ParamStore<f64>, g: f64) -> Grads<f64> {
        let mut tape = super::super::Tape::new();
        let id = store.id("qrn.w").unwrap();
        let w = tape.param(store, id).unwrap();
        let s = tape.scale(w, g).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss, store).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, id) = single(1.5);
        let mut adam = AdamState::new(&store, Group::Qrn, AdamConfig::default());
        let g = grads_of(&store, 0.0);
        adam.step(&mut store, &g).unwrap();
        assert_eq!(store.get(id).data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = single(0.0);
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&store, Group::Qrn, cfg);
        let g = grads_of(&store, 2.0);
        adam.step(&mut store, &g).unwrap();
        let delta = store.get(id).data()[0];
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let expected = -1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((delta - expected).abs() < 1e-15, "{delta}");
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn repeated_positive_gradient_keeps_descending() {
        let (mut store, id) = single(0.0);
        let mut adam = AdamState::new(&store, Group::Qrn, AdamConfig::default());
        let mut prev = 0.0;
        for _ in 0..2 {
            let g = grads_of(&store, 1.0);
            adam.step(&mut store, &g).unwrap();
            let now = store.get(id).data()[0];
            assert!(now < prev);
            prev = now;
        }
        assert_eq!(adam.t, 2);
    }
}
