//! SGD with momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::network::{Gradients, Network};
use crate::NnError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(net: &Network, lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self::for_params(&net.params(), lr, momentum, weight_decay)
    }

    /// Optimiser state for any parameter list laid out like its gradients.
    pub fn for_params(params: &[&[f32]], lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        self.step_params(net.params_mut(), grads);
    }

    /// `v = m·v + (g + wd·p); p -= lr·v`, matching the usual framework update.
    pub fn step_params(&mut self, params: Vec<&mut Vec<f32>>, grads: &Gradients) {
        let (lr, m, wd) = (self.lr, self.momentum, self.weight_decay);
        for ((p, g), v) in params.into_iter().zip(&grads.tensors).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = gi + wd * *pi;
                *vi = m * *vi + d;
                *pi -= lr * *vi;
            }
        }
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    pub fn velocity_flat(&self) -> Vec<f32> {
        self.velocity.concat()
    }

    pub fn load_velocity_flat(&mut self, flat: &[f32]) -> Result<(), NnError> {
        let total: usize = self.velocity.iter().map(Vec::len).sum();
        if flat.len() != total {
            return Err(NnError::Shape(format!(
                "velocity blob has {} values, optimiser needs {total}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for v in &mut self.velocity {
            let n = v.len();
            v.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}
