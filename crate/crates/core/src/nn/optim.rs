use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{Gradients, ParamKind, ParamStore, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, weight_decay: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with decoupled weight decay.
///
/// Each step first shrinks every trainable tensor by `1 - lr * wd`, then
/// applies the bias-corrected moment update. Tensors without a gradient in
/// a step still decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    step: u64,
    first: Vec<Option<ArrayD<T>>>,
    second: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        Self { config, step: 0, first: vec![None; store.len()], second: vec![None; store.len()] }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let c = &self.config;
        let lr = T::from_f64(c.learning_rate);
        let decay = T::from_f64(1.0 - c.learning_rate * c.weight_decay);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let eps = T::from_f64(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.kind(id) != ParamKind::Trainable {
                continue;
            }
            let i = id.index();
            let param = store.get_mut(id);
            param.mapv_inplace(|p| p * decay);
            let Some(g) = grads.get(id) else { continue };
            let m = self.first[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.second[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(param).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}
