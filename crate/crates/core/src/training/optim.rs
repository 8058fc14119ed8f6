use crate::config::TrainConfig;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Step decay: the initial rate times `lr_decay_factor` per milestone reached.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg
        .lr_decay_at
        .iter()
        .filter(|&&frac| epoch as f64 >= (frac * cfg.epochs as f64 - 1e-9).ceil())
        .count();
    cfg.lr * cfg.lr_decay_factor.powi(passed as i32)
}

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `g = grad + wd * w`, `v = mu * v + g`, `w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// Update every parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        for (p, v) in store.params_mut().iter_mut().zip(&mut self.velocity) {
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let w = p.value.data_mut();
            for ((wi, vi), gi) in w.iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
                let g = gi + wd * *wi;
                *vi = self.momentum * *vi + g;
                *wi -= lr * *vi;
            }
        }
    }
}
