//! First-order optimizers over [`Param`] lists.

use serde::{Deserialize, Serialize};

use crate::param::Param;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Optimizer state for one fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u32,
    moments: Vec<(Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update. `params` and `grads` pair up by position and the
    /// order must stay the same across calls.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    let lr = self.lr;
                    for (w, &d) in p.value_mut().data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.moments.is_empty() {
                    self.moments = grads
                        .iter()
                        .map(|g| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())))
                        .collect();
                }
                let t = f64::from(self.step);
                let c1 = 1.0 - BETA1.powf(t);
                let c2 = 1.0 - BETA2.powf(t);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
                    let w = p.value_mut().data_mut();
                    let (m, v) = (m.data_mut(), v.data_mut());
                    for i in 0..w.len() {
                        let d = g.data()[i];
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * d;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * d * d;
                        w[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}
