use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::{Scalar, Tensor};

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// `v = momentum * v + (g + wd * p); p -= lr * v`. Weight decay is applied
/// only to tensors of rank >= 2 (convolution kernels), not to biases or
/// normalization affine parameters.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let p = store.get_mut(id);
            let mut d = g.clone();
            if self.weight_decay > 0.0 && p.shape().len() >= 2 {
                d.axpy(T::of(self.weight_decay), p);
            }
            let v = match &mut self.velocity[id.index()] {
                Some(v) => {
                    v.scale(T::of(self.momentum));
                    v.add_assign(&d);
                    v
                }
                slot => slot.insert(d),
            };
            p.axpy(T::of(-lr), v);
        }
    }

    /// Momentum buffers by parameter index (for checkpointing).
    pub fn velocity(&self) -> &[Option<Tensor<T>>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Option<Tensor<T>>>) {
        self.velocity = velocity;
    }
}
