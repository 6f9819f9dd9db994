//! Model checkpoints and the deployed-weight export.
//!
//! A checkpoint is a JSON document:
//!
//! | field       | type                    | meaning                                        |
//! |-------------|-------------------------|------------------------------------------------|
//! | `format`    | integer                 | layout version, currently 1                    |
//! | `completed` | integer                 | tasks folded into the weights                  |
//! | `layers`    | array of [`LayerState`] | one entry per adapted projection, in order     |
//! | `task`      | [`TaskState`]           | frozen tokens, classifier head, seen classes   |
//!
//! Each [`LayerState`] holds the layer id, kind, rank, `W_prev` as
//! `{shape, data}` with row-major float64 data, the changed-position mask, the
//! fold count and, only for a checkpoint taken mid-task, the live adapter
//! tensors. `W_init` is not stored; it comes from the backbone.
//!
//! [`deployed_bytes`] writes the weights an inference pass uses as raw
//! little-endian float64 values, so its length depends only on the layer
//! shapes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::Mask;
use crate::baselines::FullLayer;
use crate::model::{AdaptedWeight, Learner};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Masked,
    Clora,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub layer: u32,
    pub kind: LayerKind,
    /// Adapter rank; 0 for a full layer.
    pub rank: usize,
    pub w_prev: Tensor,
    pub changed: Mask,
    pub folds: u32,
    /// Live trainable tensors in parameter order, present only mid-task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<Vec<Tensor>>,
}

/// Per-task state held outside the adapted layers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskState {
    /// Materialized token embeddings by task.
    #[serde(default)]
    pub tokens: BTreeMap<u32, Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<Tensor>,
    #[serde(default)]
    pub seen: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: u32,
    pub completed: u32,
    pub layers: Vec<LayerState>,
    pub task: TaskState,
}

fn layer_state(l: &AdaptedWeight, with_adapter: bool) -> LayerState {
    let (kind, rank, folds) = match l {
        AdaptedWeight::Masked(a) => (LayerKind::Masked, a.rank(), a.folds()),
        AdaptedWeight::CLora(c) => (LayerKind::Clora, c.inner().rank(), c.inner().folds()),
        AdaptedWeight::Full(f) => (LayerKind::Full, 0, f.folds()),
    };
    let adapter = match l {
        AdaptedWeight::Full(_) => None,
        _ if with_adapter => {
            let mut l = l.clone();
            Some(l.params_mut().into_iter().map(|p| p.value().clone()).collect())
        }
        _ => None,
    };
    LayerState {
        layer: l.layer_id(),
        kind,
        rank,
        w_prev: l.deployed().clone(),
        changed: l.changed_mask().clone(),
        folds,
        adapter,
    }
}

impl ModelCheckpoint {
    /// State of `model` after `completed` folded tasks.
    pub fn capture<L: Learner>(model: &L, completed: u32) -> Self {
        Self::build(model, completed, false)
    }

    /// Like [`capture`](Self::capture), also keeping the live adapters.
    pub fn capture_mid_task<L: Learner>(model: &L, completed: u32) -> Self {
        Self::build(model, completed, true)
    }

    fn build<L: Learner>(model: &L, completed: u32, with_adapter: bool) -> Self {
        Self {
            format: FORMAT,
            completed,
            layers: model.layers().iter().map(|l| layer_state(l, with_adapter)).collect(),
            task: model.task_state(),
        }
    }

    /// Loads this state into a model built from the same backbone and
    /// method.
    pub fn restore_into<L: Learner>(&self, model: &mut L) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {}", self.format)));
        }
        if self.layers.len() != model.layers().len() {
            return Err(Error::Config(format!(
                "checkpoint has {} layers, model has {}",
                self.layers.len(),
                model.layers().len()
            )));
        }
        for (l, s) in model.layers_mut().iter_mut().zip(&self.layers) {
            restore_layer(l, s)?;
        }
        model.restore_task_state(self.task.clone())
    }
}

fn restore_layer(l: &mut AdaptedWeight, s: &LayerState) -> Result<()> {
    if l.layer_id() != s.layer {
        return Err(Error::Config(format!(
            "checkpoint layer {} found where layer {} was expected",
            s.layer,
            l.layer_id()
        )));
    }
    match (&mut *l, s.kind) {
        (AdaptedWeight::Masked(a), LayerKind::Masked) if a.rank() == s.rank => {
            a.restore_state(s.w_prev.clone(), s.changed.clone(), s.folds)?;
        }
        (AdaptedWeight::CLora(c), LayerKind::Clora) if c.inner().rank() == s.rank => {
            c.inner_mut().restore_state(s.w_prev.clone(), s.changed.clone(), s.folds)?;
        }
        (AdaptedWeight::Full(f), LayerKind::Full) => {
            let w_init = f.w_init().clone();
            *f = FullLayer::restore(s.layer, w_init, s.w_prev.clone(), s.changed.clone(), s.folds)?;
        }
        (_, kind) => {
            return Err(Error::Config(format!(
                "layer {} is not a rank-{} {kind:?} layer",
                s.layer, s.rank
            )))
        }
    }
    if let Some(tensors) = &s.adapter {
        let params = l.params_mut();
        if params.len() != tensors.len()
            || params.iter().zip(tensors).any(|(p, t)| p.value().shape() != t.shape())
        {
            return Err(Error::Config(format!(
                "adapter tensors of layer {} do not match its parameters",
                s.layer
            )));
        }
        for (p, t) in params.into_iter().zip(tensors) {
            p.set(t.clone());
        }
    }
    Ok(())
}

/// Raw little-endian float64 values of every deployed weight, in layer
/// order.
pub fn deployed_bytes(layers: &[AdaptedWeight]) -> Vec<u8> {
    layers
        .iter()
        .flat_map(|l| l.deployed().data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}
