use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// SGD with classical momentum and L2 weight decay:
/// `v = momentum * v - lr * (grad + decay * p)`, then `p += v`.
#[derive(Debug, Clone)]
pub struct SgdState<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self::with_hyper(learning_rate, 0.9, 0.0005)
    }

    pub fn with_hyper(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// Replaces the momentum buffers, e.g. when resuming from a checkpoint.
    pub fn set_velocity(&mut self, velocity: Vec<Tensor<T>>, store: &ParamStore<T>) -> Result<()> {
        if velocity.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "{} velocity buffers for {} parameters",
                velocity.len(),
                store.len()
            )));
        }
        for (v, id) in velocity.iter().zip(store.ids()) {
            if v.shape() != store.get(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "velocity",
                    lhs: v.shape().to_vec(),
                    rhs: store.get(id).shape().to_vec(),
                });
            }
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(id) = store.ids().find(|&id| store.get(id).grad().is_none()) {
            return Err(Error::MissingGrad(store.name(id).to_string()));
        }
        if self.velocity.len() != store.len() {
            self.velocity = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        }
        let (mu, lr, wd) = (lit::<T>(self.momentum), lit::<T>(self.learning_rate), lit::<T>(self.weight_decay));
        for (id, vel) in store.ids().collect::<Vec<_>>().into_iter().zip(self.velocity.iter_mut()) {
            let param = store.get_mut(id);
            let grad = param.grad().map(<[T]>::to_vec).unwrap_or_default();
            for ((p, v), g) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(grad) {
                *v = mu * *v - lr * (g + wd * *p);
                *p += *v;
            }
        }
        Ok(())
    }
}
