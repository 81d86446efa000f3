//! Adam with L2 weight decay, and the poly learning-rate schedule.

use crate::autodiff::{Gradients, Graph};
use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// `lr0 · (1 − cur/max)^power`.
pub fn poly_lr(cur: u64, cfg: &OptimConfig) -> Result<f64> {
    if cur > cfg.max_iteration {
        return Err(Error::InvalidValue(format!(
            "iteration {cur} exceeds max_iteration {}",
            cfg.max_iteration
        )));
    }
    Ok((1.0 - cur as f64 / cfg.max_iteration as f64).powf(cfg.power) * cfg.lr0)
}

/// First and second moment estimates, indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    /// One update of every trainable parameter bound in `g`; parameters that did
    /// not receive a gradient still decay.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        g: &Graph<T>,
        grads: &Gradients<T>,
        lr: f64,
        cfg: &OptimConfig,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            let param = store.get_mut(id);
            let grad = g.bound_param(id).and_then(|v| grads.get(v));
            if let Some(gr) = grad {
                if !gr.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", param.name)));
                }
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in param.value.data_mut().iter_mut().enumerate() {
                let gj = grad.map_or(0.0, |gr| gr.data()[j].as_f64()) + cfg.weight_decay * w.as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
                *w = T::from_f64(w.as_f64() - update);
            }
        }
        Ok(())
    }
}
