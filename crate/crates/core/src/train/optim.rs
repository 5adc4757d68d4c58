use serde::{Deserialize, Serialize};

use crate::backbone::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
/// Frozen parameters and buffers are never touched.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &ParamStore) -> Self {
        Self {
            config,
            velocity: vec![None; params.len()],
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        let (mu, wd, lr) = (self.config.momentum as f32, self.config.weight_decay as f32, lr as f32);
        for id in 0..params.len() {
            let p = params.param_mut(id);
            if !p.learnable || p.frozen {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let first = self.velocity[id].is_none();
            let v = self.velocity[id].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((w, &dg), vel) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = dg + wd * *w;
                *vel = if first { d } else { mu * *vel + d };
                *w -= lr * *vel;
            }
        }
    }
}
