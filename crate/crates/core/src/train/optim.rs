use serde::{Deserialize, Serialize};

use crate::nn::{Gradients, ParamStore, Real, Tensor};

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Adam with per-tensor step counts. Tensors without a gradient in a step are
/// left alone, moments included.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
    pub steps: Vec<u64>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let n = store.len();
        Adam {
            config,
            m: vec![None; n],
            v: vec![None; n],
            steps: vec![0; n],
        }
    }

    /// Applies one update and clears `grads`. A non-finite gradient aborts before
    /// any tensor is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &mut Gradients<T>) -> Result<(), TrainError> {
        for (id, g) in grads.iter() {
            if !g.all_finite() {
                return Err(TrainError::NonFinite(store.get(id).name.clone()));
            }
        }
        let c = self.config;
        if c.clip_norm > 0.0 {
            let norm = grads.global_norm().to_f64().unwrap_or(f64::INFINITY);
            if norm > c.clip_norm {
                grads.scale(T::lit(c.clip_norm / norm));
            }
        }
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps) = (T::one(), T::lit(c.eps));
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let i = id.0;
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let lr_t = T::lit(c.lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t)));
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.value.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = b1 * md[j] + (one - b1) * gj;
                vd[j] = b2 * vd[j] + (one - b2) * gj * gj;
                pd[j] -= lr_t * md[j] / (vd[j].sqrt() + eps);
            }
        }
        grads.clear();
        Ok(())
    }
}
