use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::Result;

/// SGD with heavy-ball momentum and L2 weight decay (`v ← μv + g + λw`, `w ← w − η·v`).
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Updates every parameter that received a gradient.
    pub fn step<'a>(&mut self, grads: &GradStore, params: impl Iterator<Item = (&'a str, &'a Var)>, lr: f64) -> Result<()> {
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let w = var.as_detached_tensor();
            let mut d = g.detach();
            if self.weight_decay != 0.0 {
                d = (d + (&w * self.weight_decay)?)?;
            }
            if self.momentum != 0.0 {
                d = match self.velocity.get(name) {
                    Some(v) => ((v * self.momentum)? + d)?,
                    None => d,
                };
                self.velocity.insert(name.to_string(), d.clone());
            }
            var.set(&(w - (d * lr)?)?)?;
        }
        Ok(())
    }
}
