//! rmsprop with coupled weight decay.
//!
//! ```text
//! g     = grad + weight_decay * param
//! cache = (1 - sq_decay) * cache + sq_decay * g²
//! param = param - learning_rate * g / (sqrt(cache) + epsilon)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimHyper {
    pub learning_rate: f64,
    /// Weight on the newest squared gradient in the running average.
    pub sq_decay: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.0005,
            sq_decay: 0.1,
            weight_decay: 0.01,
            epsilon: 1e-8,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.sq_decay > 0.0
            && self.sq_decay < 1.0
            && self.weight_decay >= 0.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }
}

/// Running mean of squared gradients, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub cache: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            cache: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One rmsprop update over every parameter tensor.
pub fn rmsprop_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptimState<T>,
    hyper: &OptimHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.cache.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} cache tensors",
            params.len(),
            grads.len(),
            state.cache.len()
        )));
    }
    for (i, ((p, g), c)) in params.iter().zip(grads).zip(&state.cache).enumerate() {
        if p.shape() != g.shape() || p.shape() != c.shape() {
            return Err(Error::Contract(format!(
                "parameter {i}: shapes {:?} / {:?} / {:?} disagree",
                p.shape(),
                g.shape(),
                c.shape()
            )));
        }
    }
    let lr = T::from_f64(hyper.learning_rate);
    let rho = T::from_f64(hyper.sq_decay);
    let keep = T::one() - rho;
    let wd = T::from_f64(hyper.weight_decay);
    let eps = T::from_f64(hyper.epsilon);
    for ((p, g), c) in params.iter_mut().zip(grads).zip(&mut state.cache) {
        for ((pv, &gv), cv) in p.data_mut().iter_mut().zip(g.data()).zip(c.data_mut()) {
            let g = gv + wd * *pv;
            *cv = keep * *cv + rho * g * g;
            *pv = *pv - lr * g / (cv.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}
