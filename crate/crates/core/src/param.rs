use serde::{Deserialize, Serialize};

use crate::tensor::{Gradients, Tape, Tensor, Var};

/// A trainable tensor plus the tape variable it is bound to for the
/// current step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    value: Tensor,
    #[serde(skip)]
    slot: Option<Var>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self { value, slot: None }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn set(&mut self, value: Tensor) {
        self.value = value;
        self.slot = None;
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Registers the value as a leaf on `tape`.
    pub fn bind(&mut self, tape: &Tape) -> Var {
        let v = tape.leaf(self.value.clone());
        self.slot = Some(v);
        v
    }

    pub fn unbind(&mut self) {
        self.slot = None;
    }

    /// The bound leaf when bound to `tape`, otherwise a fresh constant.
    pub fn var(&self, tape: &Tape) -> Var {
        match self.slot {
            Some(v) if tape.owns(v) => v,
            _ => tape.constant(self.value.clone()),
        }
    }

    /// Gradient for the bound leaf; zeros when the leaf did not reach the root.
    pub fn grad(&self, grads: &Gradients) -> Tensor {
        self.slot
            .and_then(|v| grads.get(v).cloned())
            .unwrap_or_else(|| Tensor::zeros(self.value.shape()))
    }
}
