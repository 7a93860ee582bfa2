//! Momentum SGD. Weight decay joins the gradient before the momentum update,
//! the common deep-learning convention.

use super::{Parameter, Scalar};
use crate::error::{Error, Result};

/// One optimizer step over a set of parameters.
///
/// `v <- momentum * v + grad + weight_decay * w; w <- w - lr * v`, applied to
/// trainable parameters only. Gradients are validated first: a non-finite
/// entry anywhere aborts the step before any parameter moves. Gradients are
/// zeroed after a successful update so the next pass starts clean.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Parameter<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        if !p.trainable() {
            continue;
        }
        if let Some(bad) = p.grad().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {} (shape {:?}) at element {}",
                i,
                p.shape(),
                bad
            )));
        }
    }
    for p in params.iter_mut() {
        if p.trainable() {
            p.sgd_update(lr, momentum, weight_decay);
        }
    }
    Ok(())
}

impl<T: Scalar> Parameter<T> {
    /// The update itself, after finiteness has been established.
    pub(crate) fn sgd_update(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        let lr = T::from_f64(lr);
        let mu = T::from_f64(momentum);
        let wd = T::from_f64(weight_decay);
        if momentum != 0.0 {
            let vel = self.velocity_mut();
            // take the buffer out so the value can be borrowed mutably too
            let mut vel = std::mem::take(vel);
            {
                let grad = &self.grad;
                let data = self.value.data_mut();
                for ((v, &g), w) in vel.iter_mut().zip(grad).zip(data.iter_mut()) {
                    *v = mu * *v + g + wd * *w;
                    *w = *w - lr * *v;
                }
            }
            self.velocity = Some(vel);
        } else {
            let grad = &self.grad;
            let data = self.value.data_mut();
            for (&g, w) in grad.iter().zip(data.iter_mut()) {
                *w = *w - lr * (g + wd * *w);
            }
        }
        self.grad.fill(T::zero());
    }
}
