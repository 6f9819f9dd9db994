//! Toy attention networks whose projection weights are adapted task by task.

mod classifier;
mod denoiser;

pub use classifier::{ClassifierBackbone, ClassifierConfig, ClassifierModel};
pub use denoiser::{DenoiserBackbone, DenoiserConfig, DenoiserModel, Schedule};

use serde::{Deserialize, Serialize};

use crate::adapters::{AdaptedLinear, FoldRecord, GumbelNoise, LayerTerms, Mask};
use crate::baselines::{CLoraLayer, FullLayer};
use crate::checkpoint::TaskState;
use crate::data::{ConceptBatch, ConceptData};
use crate::losses::Mode;
use crate::metrics::Embedder;
use crate::param::Param;
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer::{Method, MethodConfig, TaskSpec};
use crate::Result;

/// Options for pretraining a frozen backbone on generic concepts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub concepts: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// One adapted projection under any of the three methods.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum AdaptedWeight {
    Masked(AdaptedLinear),
    CLora(CLoraLayer),
    Full(FullLayer),
}

impl AdaptedWeight {
    pub fn for_method(layer: u32, w_init: Tensor, cfg: &MethodConfig) -> Result<Self> {
        Ok(match cfg.method {
            Method::Stamina => {
                AdaptedWeight::Masked(AdaptedLinear::new(layer, w_init, cfg.adapter_config())?)
            }
            Method::Clora => AdaptedWeight::CLora(CLoraLayer::new(layer, w_init, cfg.rank, cfg.seed)?),
            Method::Naive => AdaptedWeight::Full(FullLayer::new(layer, w_init)?),
        })
    }

    pub fn layer_id(&self) -> u32 {
        match self {
            AdaptedWeight::Masked(l) => l.layer_id(),
            AdaptedWeight::CLora(l) => l.inner().layer_id(),
            AdaptedWeight::Full(l) => l.layer_id(),
        }
    }

    pub fn w_init(&self) -> &Tensor {
        match self {
            AdaptedWeight::Masked(l) => l.w_init(),
            AdaptedWeight::CLora(l) => l.inner().w_init(),
            AdaptedWeight::Full(l) => l.w_init(),
        }
    }

    /// The weight an inference pass uses once the current task is folded
    /// (for a full layer, its live value).
    pub fn deployed(&self) -> &Tensor {
        match self {
            AdaptedWeight::Masked(l) => l.w_prev(),
            AdaptedWeight::CLora(l) => l.inner().w_prev(),
            AdaptedWeight::Full(l) => l.weight(),
        }
    }

    pub fn changed_mask(&self) -> &Mask {
        match self {
            AdaptedWeight::Masked(l) => l.changed_mask(),
            AdaptedWeight::CLora(l) => l.inner().changed_mask(),
            AdaptedWeight::Full(l) => l.changed_mask(),
        }
    }

    /// `|W_prev − W_init|`.
    pub fn prior_change_abs(&self) -> Tensor {
        match self {
            AdaptedWeight::Masked(l) => l.prior_change_abs(),
            AdaptedWeight::CLora(l) => l.inner().prior_change_abs(),
            AdaptedWeight::Full(l) => l
                .weight()
                .sub(l.w_init())
                .expect("same shape")
                .map(f64::abs),
        }
    }

    pub fn terms(&self, tape: &Tape, noise: &GumbelNoise) -> Result<LayerTerms> {
        Ok(match self {
            AdaptedWeight::Masked(l) => l.terms(tape, noise)?,
            AdaptedWeight::CLora(l) => l.terms(tape)?,
            AdaptedWeight::Full(l) => l.terms(tape)?,
        })
    }

    pub fn fold(&mut self) -> Result<FoldRecord> {
        Ok(match self {
            AdaptedWeight::Masked(l) => l.fold()?,
            AdaptedWeight::CLora(l) => l.fold()?,
            AdaptedWeight::Full(l) => l.fold()?,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            AdaptedWeight::Masked(l) => l.params_mut(),
            AdaptedWeight::CLora(l) => l.inner_mut().params_mut(),
            AdaptedWeight::Full(l) => vec![l.param_mut()],
        }
    }

    pub fn trainable_count(&self) -> usize {
        match self {
            AdaptedWeight::Masked(l) => l.trainable_count(),
            AdaptedWeight::CLora(l) => l.inner().trainable_count(),
            AdaptedWeight::Full(l) => l.weight().numel(),
        }
    }

    /// Frobenius distance of the deployed weight from `W_init`.
    pub fn distance_from_init(&self) -> f64 {
        self.deployed().sub(self.w_init()).expect("same shape").norm()
    }
}

/// Keys the randomness of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepKey {
    pub seed: u64,
    pub task: u32,
    pub step: u64,
}

/// What an evaluation at a task boundary records for one earlier task.
#[derive(Debug, Clone, PartialEq)]
pub enum Snapshot {
    /// Embedded generated samples.
    Embedded(Tensor),
    Accuracy(f64),
}

/// Inputs for boundary evaluations. `eval` holds held-out splits only.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub embedder: &'a Embedder,
    pub gen_samples: usize,
    pub gen_seed: u64,
    pub eval: &'a [ConceptData],
}

/// A network trained through the continual loop.
pub trait Learner {
    fn mode(&self) -> Mode;

    fn layers(&self) -> &[AdaptedWeight];

    fn layers_mut(&mut self) -> &mut [AdaptedWeight];

    /// Creates the per-task parameters (token, head columns) for `spec`.
    fn begin_task(&mut self, spec: &TaskSpec, cfg: &MethodConfig) -> Result<()>;

    /// Every trainable parameter: adapted layers first, then task parameters.
    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Trainable parameters outside the adapted layers.
    fn task_param_count(&self) -> usize;

    /// Task loss with the adapted layers' effective weights in `weights`
    /// (ordered like [`layers`](Self::layers)).
    fn task_loss(&self, tape: &Tape, weights: &[Var], batch: &ConceptBatch, key: StepKey) -> Result<Var>;

    /// Freezes per-task parameters after the layers were folded.
    fn finish_task(&mut self, spec: &TaskSpec) -> Result<()>;

    /// Evaluates task `task` with the folded model after task `current`.
    fn snapshot(&self, task: u32, current: u32, ctx: &EvalContext<'_>) -> Result<Snapshot>;

    fn backbone_param_count(&self) -> usize;

    /// Frozen per-task state outside the adapted layers.
    fn task_state(&self) -> TaskState;

    fn restore_task_state(&mut self, state: TaskState) -> Result<()>;
}
