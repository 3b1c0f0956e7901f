use serde::{Deserialize, Serialize};

use super::{Gradients, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v <- mu v + (g + wd w)`, `w <- w - lr v`. Frozen groups are skipped.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: None }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, model: &mut ModelState, grads: &Gradients) {
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        let velocity = self.velocity.get_or_insert_with(|| model.zero_grads());
        for loc in model.parameter_locations() {
            if !model.is_trainable(loc) {
                continue;
            }
            let g = grads.get(loc);
            let v = match loc {
                super::ParamLocation::Backbone { group, tensor } => &mut velocity.backbone[group][tensor],
                super::ParamLocation::Head { tensor } => &mut velocity.head[tensor],
            };
            let w = model.param_mut(loc);
            for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = momentum * *vi + gi + weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}
