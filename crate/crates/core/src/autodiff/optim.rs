use super::{ParamStore, Tensor};

/// Momentum SGD with global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub grad_clip: Option<f64>,
    velocity: Vec<Option<Tensor>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Sgd {
    pub fn new(momentum: f64, grad_clip: Option<f64>) -> Self {
        Self { momentum, grad_clip, velocity: Vec::new() }
    }

    /// Applies one update from the gradients held in `store`. Gradients are
    /// left untouched; call [`ParamStore::zero_grad`] before the next batch.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> StepStats {
        let params = store.params_mut();
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        let grad_norm = params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.squared_norm())
            .sum::<f64>()
            .sqrt();
        let factor = match self.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        for (p, vel) in params.iter_mut().zip(self.velocity.iter_mut()) {
            if !p.trainable {
                continue;
            }
            let v = vel.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            let rate = lr * p.lr_scale;
            for ((w, g), m) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
                *m = self.momentum * *m + g * factor;
                *w -= rate * *m;
            }
        }
        StepStats { grad_norm, clipped: factor < 1.0 }
    }
}
