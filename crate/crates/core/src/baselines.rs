//! Reference methods: C-LoRA (unmasked stacked low-rank residuals with a
//! forgetting penalty) and naive sequential fine-tuning of the full weight.

use serde::{Deserialize, Serialize};

use crate::adapters::{
    AdaptedLinear, AdapterConfig, FoldRecord, GumbelConfig, LayerTerms, Mask, MaskGate, MaskKind,
    Result,
};
use crate::model::Learner;
use crate::optim::Optimizer;
use crate::param::Param;
use crate::tensor::{Tape, Tensor};
use crate::trainer::{self, MethodConfig, StepInput};
use crate::losses::LossBreakdown;

/// `W_t = W_init + Σ A_t'·B_t'`, folded after every task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CLoraLayer(AdaptedLinear);

impl CLoraLayer {
    pub fn new(layer: u32, w_init: Tensor, rank: usize, init_seed: u64) -> Result<Self> {
        let cfg = AdapterConfig {
            rank,
            mask: MaskKind::Off,
            gate: MaskGate::Gumbel(GumbelConfig::default()),
            init_seed,
        };
        Ok(Self(AdaptedLinear::new(layer, w_init, cfg)?))
    }

    pub fn inner(&self) -> &AdaptedLinear {
        &self.0
    }

    pub fn inner_mut(&mut self) -> &mut AdaptedLinear {
        &mut self.0
    }

    pub fn terms(&self, tape: &Tape) -> Result<LayerTerms> {
        self.0.terms(tape, &crate::adapters::GumbelNoise::Zero)
    }

    pub fn fold(&mut self) -> Result<FoldRecord> {
        self.0.fold()
    }
}

/// A directly trainable weight, used by naive sequential fine-tuning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullLayer {
    layer: u32,
    w_init: Tensor,
    w: Param,
    task_start: Tensor,
    changed: Mask,
    folds: u32,
}

impl FullLayer {
    pub fn new(layer: u32, w_init: Tensor) -> Result<Self> {
        let (r, c) = (w_init.rows(), w_init.cols());
        if w_init.shape().len() != 2 {
            return Err(crate::tensor::TensorError::Rank {
                op: "full_layer",
                expected: 2,
                got: w_init.shape().to_vec(),
            }
            .into());
        }
        Ok(Self {
            layer,
            w: Param::new(w_init.clone()),
            task_start: w_init.clone(),
            w_init,
            changed: Mask::zeros(r, c),
            folds: 0,
        })
    }

    pub fn layer_id(&self) -> u32 {
        self.layer
    }

    pub fn w_init(&self) -> &Tensor {
        &self.w_init
    }

    pub fn weight(&self) -> &Tensor {
        self.w.value()
    }

    pub fn changed_mask(&self) -> &Mask {
        &self.changed
    }

    pub fn folds(&self) -> u32 {
        self.folds
    }

    pub fn param_mut(&mut self) -> &mut Param {
        &mut self.w
    }

    pub fn terms(&self, tape: &Tape) -> Result<LayerTerms> {
        let weight = self.w.var(tape);
        let residual = tape.sub(weight, tape.constant(self.task_start.clone()))?;
        Ok(LayerTerms {
            weight,
            residual,
            soft_mask: None,
        })
    }

    /// Closes the task: records the change since the task began.
    pub fn fold(&mut self) -> Result<FoldRecord> {
        let delta = self.w.value().sub(&self.task_start)?;
        let support = Mask::nonzero(&delta)?;
        let record = FoldRecord::from_support(self.layer, &support, &self.changed, delta.norm());
        self.changed.union_with(&support);
        self.task_start = self.w.value().clone();
        self.folds += 1;
        Ok(record)
    }

    pub fn restore(layer: u32, w_init: Tensor, w: Tensor, changed: Mask, folds: u32) -> Result<Self> {
        let mut l = Self::new(layer, w_init)?;
        l.w = Param::new(w.clone());
        l.task_start = w;
        l.changed = changed;
        l.folds = folds;
        Ok(l)
    }
}

/// One optimizer step of the C-LoRA objective `task + λ_f·forget`.
pub fn clora_step<L: Learner>(
    model: &mut L,
    input: &StepInput<'_>,
    cfg: &MethodConfig,
    opt: &mut Optimizer,
) -> trainer::Result<LossBreakdown> {
    debug_assert_eq!(cfg.method, trainer::Method::Clora);
    trainer::step(model, input, cfg, opt)
}

/// One plain task-loss step on the full weights.
pub fn naive_step<L: Learner>(
    model: &mut L,
    input: &StepInput<'_>,
    cfg: &MethodConfig,
    opt: &mut Optimizer,
) -> trainer::Result<LossBreakdown> {
    debug_assert_eq!(cfg.method, trainer::Method::Naive);
    trainer::step(model, input, cfg, opt)
}
