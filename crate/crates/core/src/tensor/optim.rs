use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{ParamGroup, ParamId, ParamStore};

/// Updates every non-frozen parameter that currently holds a gradient.
/// Parameters without a gradient (not on the active route this step) are left alone.
pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore);
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let Some(grad) = p.tensor.grad.take() else { continue };
            for (w, g) in p.tensor.values_mut().iter_mut().zip(&grad) {
                *w -= self.lr * g;
            }
            p.tensor.grad = Some(grad);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

/// Adam with decoupled weight decay and optional per-group learning rates.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    group_lr: BTreeMap<ParamGroup, f64>,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            group_lr: BTreeMap::new(),
            state: HashMap::new(),
        }
    }

    pub fn with_group_lr(mut self, group: ParamGroup, lr: f64) -> Self {
        self.group_lr.insert(group, lr);
        self
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, store: &mut ParamStore) {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let lr = *self.group_lr.get(&store.group(id)).unwrap_or(&self.config.lr);
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let Some(grad) = p.tensor.grad.take() else { continue };
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            for (((w, &g), m), v) in p
                .tensor
                .values_mut()
                .iter_mut()
                .zip(&grad)
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *w -= lr * weight_decay * *w;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.tensor.grad = Some(grad);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Parameter, Tensor};

    fn store_with(value: f64, grad: f64, frozen: bool) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .insert("w", ParamGroup::Adapter, Parameter::new(Tensor::scalar(value), false))
            .unwrap();
        s.get_mut(id).accumulate_grad(&[grad]);
        s.get_mut(id).frozen = frozen;
        (s, id)
    }

    #[test]
    fn sgd_single_step() {
        let (mut s, id) = store_with(1.0, 1.0, false);
        Sgd { lr: 0.1 }.step(&mut s);
        assert!((s.get(id).values()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let (mut s, id) = store_with(1.0, 1.0, true);
        Sgd { lr: 0.1 }.step(&mut s);
        AdamW::new(AdamWConfig::default()).step(&mut s);
        assert_eq!(s.get(id).values()[0], 1.0);
    }

    #[test]
    fn adamw_first_step_matches_hand_formula() {
        let (w0, g, lr, wd, eps) = (0.5, 0.2, 0.01, 0.1, 1e-8);
        let (b1, b2) = (0.9, 0.999);
        let (mut s, id) = store_with(w0, g, false);
        let mut opt = AdamW::new(AdamWConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
        });
        opt.step(&mut s);
        let decayed = w0 - lr * wd * w0;
        let m_hat = (1.0 - b1) * g / (1.0 - b1);
        let v_hat = (1.0 - b2) * g * g / (1.0 - b2);
        let expected = decayed - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((s.get(id).values()[0] - expected).abs() < 1e-15);
        // From zero moments the first Adam step has magnitude ~lr regardless of |g|.
        assert!(((decayed - expected) - lr).abs() < 1e-6);
    }

    #[test]
    fn parameters_without_gradient_are_skipped() {
        let mut s = ParamStore::new();
        let id = s
            .insert("w", ParamGroup::Adapter, Parameter::new(Tensor::scalar(1.0), false))
            .unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut s);
        assert_eq!(s.get(id).values()[0], 1.0);
    }

    #[test]
    fn group_learning_rate_overrides_default() {
        let (mut s, id) = store_with(0.0, 1.0, false);
        let mut opt = AdamW::new(AdamWConfig::default()).with_group_lr(ParamGroup::Adapter, 0.5);
        opt.step(&mut s);
        assert!((s.get(id).values()[0] + 0.5).abs() < 1e-6);
    }
}
