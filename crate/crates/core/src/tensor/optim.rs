//! RMSprop parameter updates.

use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// RMSprop state: one moving average of squared gradients per parameter,
/// keyed by parameter name.
///
/// Update rule: `v <- decay*v + (1-decay)*g^2; p <- p - lr*g/(sqrt(v)+eps)`.
pub struct RmsProp<F: Scalar> {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    sq_avg: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> RmsProp<F> {
    pub fn new(lr: f64, decay: f64, eps: f64) -> Self {
        RmsProp { lr, decay, eps, sq_avg: BTreeMap::new() }
    }

    /// Conventional defaults around a chosen learning rate.
    pub fn with_lr(lr: f64) -> Self {
        Self::new(lr, 0.9, 1e-8)
    }

    /// Apply one update. `params` and `grads` must be name-aligned; a
    /// gradient for an unknown parameter after the first step is a
    /// consistency error.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<F>)], grads: &[(String, Tensor<F>)]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Param(format!(
                "optimizer got {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        let first_step = self.sq_avg.is_empty();
        let lr = F::from_f64(self.lr);
        let decay = F::from_f64(self.decay);
        let one_minus = F::from_f64(1.0 - self.decay);
        let eps = F::from_f64(self.eps);
        for ((pname, param), (gname, grad)) in params.iter_mut().zip(grads) {
            if pname != gname {
                return Err(Error::Param(format!(
                    "parameter/gradient name mismatch: {pname} vs {gname}"
                )));
            }
            if grad.shape() != param.shape() {
                return Err(Error::shape(
                    "rmsprop",
                    format!("param {pname}: {:?} vs grad {:?}", param.shape(), grad.shape()),
                ));
            }
            if first_step {
                self.sq_avg.insert(pname.clone(), Tensor::zeros(param.shape()));
            }
            let v = self.sq_avg.get_mut(pname).ok_or_else(|| {
                Error::Param(format!("missing optimizer state for parameter {pname}"))
            })?;
            for ((pv, &gv), vv) in
                param.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut().iter_mut())
            {
                *vv = decay * *vv + one_minus * gv * gv;
                *pv -= lr * gv / (vv.sqrt() + eps);
            }
        }
        Ok(())
    }
}
