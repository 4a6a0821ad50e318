//! Adam with elementwise gradient clipping and decoupled weight decay.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub clip_value: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 0.004,
            epsilon: 1e-7,
            clip_value: 2.0,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && self.epsilon > 0.0
            && self.clip_value > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct OptimizerState<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, ArrayD<T>>,
    pub v: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One update of every parameter in `params`. A parameter without an entry
/// in `grads` is treated as having a zero gradient.
///
/// Per element: `g = clip(g, ±clip)`, `m = b1 m + (1-b1) g`, `v = b2 v + (1-b2) g²`,
/// `θ -= lr m̂ / (sqrt(v̂) + eps) + lr wd θ`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, ArrayD<T>>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .map_err(|_| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(shape_err!(
                "gradient {name}: {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            ));
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::of(1.0 - c.beta1.powi(t));
    let bc2 = T::of(1.0 - c.beta2.powi(t));
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (lr, wd, eps, clip) = (
        T::of(c.lr),
        T::of(c.weight_decay),
        T::of(c.epsilon),
        T::of(c.clip_value),
    );
    for (name, theta) in params.iter_mut() {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(theta.raw_dim()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(theta.raw_dim()));
        if m.shape() != theta.shape() {
            return Err(shape_err!(
                "optimizer moment {name}: {:?} vs {:?}",
                m.shape(),
                theta.shape()
            ));
        }
        let zero = ArrayD::zeros(theta.raw_dim());
        let g = grads.get(name).unwrap_or(&zero);
        Zip::from(&mut **theta)
            .and(&mut *m)
            .and(&mut *v)
            .and(g)
            .for_each(|th, m, v, &g| {
                let g = g.max(-clip).min(clip);
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *th = *th - lr * mhat / (vhat.sqrt() + eps) - lr * wd * *th;
            });
    }
    Ok(())
}
