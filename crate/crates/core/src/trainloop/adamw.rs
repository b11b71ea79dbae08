//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{DenseArray, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("adam eps must be > 0"));
        }
        Ok(())
    }
}

/// First and second moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<DenseArray<T>>,
    pub v: Vec<DenseArray<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[(String, DenseArray<T>)]) -> Self {
        let zeros = || params.iter().map(|(_, p)| DenseArray::zeros(p.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn check_shapes(&self, params: &[(String, DenseArray<T>)]) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer holds {} moment pairs for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for ((name, p), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::invalid(format!(
                    "moments of {name} have shapes {:?}/{:?}, parameter has {:?}",
                    m.shape(),
                    v.shape(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One update of every tensor:
///
/// ```text
/// m ← β1 m + (1 − β1) g
/// v ← β2 v + (1 − β2) g²
/// θ ← θ (1 − lr wd) − lr m̂ / (√v̂ + ε)
/// ```
///
/// Non-finite gradients abort before anything is modified.
pub fn adamw_step<T: Real>(
    params: &mut [(String, DenseArray<T>)],
    grads: &[DenseArray<T>],
    opt: &mut OptimizerState<T>,
    hp: &AdamParams,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    opt.check_shapes(params)?;
    for ((name, p), g) in params.iter().zip(grads) {
        if g.shape() != p.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
            });
        }
    }

    opt.step += 1;
    let t = opt.step as i32;
    let b1 = T::from_f64(hp.beta1);
    let b2 = T::from_f64(hp.beta2);
    let c1 = T::from_f64(1.0 - hp.beta1.powi(t));
    let c2 = T::from_f64(1.0 - hp.beta2.powi(t));
    let lr = T::from_f64(hp.lr);
    let decay = T::from_f64(1.0 - hp.lr * hp.weight_decay);
    let eps = T::from_f64(hp.eps);
    let one = T::one();

    for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(opt.m.iter_mut().zip(opt.v.iter_mut())) {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((theta, &g), (m, v)) in it {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta = *theta * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
