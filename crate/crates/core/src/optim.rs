//! Adam with bias correction, and the cosine-annealed learning rate.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub first: Tensor<T>,
    pub second: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// Keyed by parameter name; shapes match the parameters.
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = (&'a String, &'a Tensor<T>)>) -> Self {
        let moments = params
            .into_iter()
            .map(|(name, p)| {
                (
                    name.clone(),
                    Moments {
                        first: Tensor::zeros(p.shape()),
                        second: Tensor::zeros(p.shape()),
                    },
                )
            })
            .collect();
        OptimizerState {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            moments,
        }
    }

    /// One bias-corrected Adam update. Parameters without a gradient entry
    /// are left untouched; the step counter advances once per call.
    pub fn adam_step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        for (name, g) in grads {
            let Some(p) = params.get(name) else {
                return Err(Error::config(format!("gradient for unknown parameter `{name}`")));
            };
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("`{name}`: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            if !self.moments.contains_key(name) {
                return Err(Error::config(format!("no optimizer moments for `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (lit::<T>(self.beta1), lit::<T>(self.beta2), lit::<T>(self.eps));
        let (one_b1, one_b2) = (lit::<T>(1.0 - self.beta1), lit::<T>(1.0 - self.beta2));
        let step_size = lit::<T>(lr / c1);
        let sqrt_c2 = lit::<T>(c2.sqrt());
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let mo = self.moments.get_mut(name).expect("checked above");
            let (m, v) = (mo.first.data_mut(), mo.second.data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv -= step_size * *mv / (vv.sqrt() / sqrt_c2 + eps);
            }
        }
        Ok(())
    }
}

/// `0.5 * lr0 * (1 + cos(pi * step / total_steps))`, clamped at zero.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("cosine schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::config(format!("step {step} beyond schedule length {total_steps}")));
    }
    let frac = step as f64 / total_steps as f64;
    Ok((0.5 * lr0 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.0))
}
