//! The continual loop: train one task's adapters and token, fold, snapshot,
//! move on. Nothing from an earlier task's training data is reachable.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, FoldRecord, GumbelConfig, GumbelNoise, MaskGate, MaskKind};
use crate::data::{ConceptBatch, ConceptParams, TaskData, TaskSource};
use crate::losses::{
    forgetting_loss, sparsity_loss, sum_terms, total_loss, LossBreakdown, LossTerms, LossWeights, Mode,
};
use crate::model::{EvalContext, Learner, Snapshot, StepKey};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{self, domain};
use crate::tensor::{Tape, Tensor};
pub use crate::Result;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Stamina,
    Clora,
    Naive,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Stamina, Method::Clora, Method::Naive];

    pub fn name(self) -> &'static str {
        match self {
            Method::Stamina => "stamina",
            Method::Clora => "clora",
            Method::Naive => "naive",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Mask fixed to all ones.
    NoMask,
    /// Plain learnable token vector instead of the token MLP.
    NoTokenMlp,
    /// Directly learned logit tensor instead of the mask MLP.
    NoMaskMlp,
    /// Sigmoid of the channel-1 logits: no noise, no hard forward.
    SigmoidInsteadOfGumbel,
    NoSparsity,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoMask,
        Ablation::NoTokenMlp,
        Ablation::NoMaskMlp,
        Ablation::SigmoidInsteadOfGumbel,
        Ablation::NoSparsity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoMask => "no_mask",
            Ablation::NoTokenMlp => "no_token_mlp",
            Ablation::NoMaskMlp => "no_mask_mlp",
            Ablation::SigmoidInsteadOfGumbel => "sigmoid_instead_of_gumbel",
            Ablation::NoSparsity => "no_sparsity",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Mlp,
    Plain,
}

/// Which head columns the classifier's loss sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Only the current task's classes.
    CurrentTask,
    /// Every class seen so far.
    Seen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub ablations: BTreeSet<Ablation>,
    pub rank: usize,
    pub tau: f64,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl MethodConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            ablations: BTreeSet::new(),
            rank: 4,
            tau: 0.5,
            weights: match method {
                Method::Stamina => LossWeights::STAMINA,
                Method::Clora => LossWeights::CLORA,
                Method::Naive => LossWeights::NONE,
            },
            learning_rate: 5e-4,
            optimizer: OptimizerKind::Adam,
            seed,
        }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.ablations.insert(a);
        self
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.ablations.is_empty() && self.method != Method::Stamina {
            return Err(Error::Config(format!(
                "ablations only apply to stamina, not {}",
                self.method
            )));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !self.weights.is_valid() {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Run label, e.g. `stamina` or `stamina-no_sparsity`.
    pub fn label(&self) -> String {
        let mut s = self.method.name().to_string();
        for a in &self.ablations {
            s.push('-');
            s.push_str(a.name());
        }
        s
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        let mask = if self.has(Ablation::NoMask) {
            MaskKind::Off
        } else if self.has(Ablation::NoMaskMlp) {
            MaskKind::Direct
        } else {
            MaskKind::Mlp
        };
        let gate = if self.has(Ablation::SigmoidInsteadOfGumbel) {
            MaskGate::Sigmoid
        } else {
            MaskGate::Gumbel(GumbelConfig {
                tau: self.tau,
                hard: true,
                seed: self.seed,
            })
        };
        AdapterConfig {
            rank: self.rank,
            mask,
            gate,
            init_seed: self.seed,
        }
    }

    pub fn token_kind(&self) -> TokenKind {
        if self.method == Method::Stamina && !self.has(Ablation::NoTokenMlp) {
            TokenKind::Mlp
        } else {
            TokenKind::Plain
        }
    }

    pub fn head_kind(&self) -> HeadKind {
        match self.method {
            Method::Naive => HeadKind::Seen,
            _ => HeadKind::CurrentTask,
        }
    }

    /// Loss weights after ablations; naive fine-tuning has no regularizers.
    pub fn effective_weights(&self) -> LossWeights {
        match self.method {
            Method::Naive => LossWeights::NONE,
            _ if self.has(Ablation::NoSparsity) => LossWeights {
                lambda_s: 0.0,
                ..self.weights
            },
            _ => self.weights,
        }
    }
}

/// One task of the continual sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: u32,
    pub concept: ConceptParams,
    pub steps: usize,
    pub batch_size: usize,
    pub mode: Mode,
}

/// Per-run record of everything the metrics need.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContinualLog {
    pub label: String,
    pub mode: Option<Mode>,
    /// Tasks trained and folded so far.
    pub completed: u32,
    /// `embeddings[i-1][j-1]` holds the embedded samples `X_{i,j}`.
    pub embeddings: Vec<Vec<Tensor>>,
    /// `accuracy[i-1][j-1]`: accuracy (%) on task `j` after task `i`.
    pub accuracy: Vec<Vec<f64>>,
    /// `distances[t-1][l]`: `‖W_t − W_init‖_F` of layer `l`.
    pub distances: Vec<Vec<f64>>,
    pub folds: Vec<Vec<FoldRecord>>,
    pub losses: Vec<Vec<LossBreakdown>>,
    pub trainable_params: usize,
    pub backbone_params: usize,
}

impl ContinualLog {
    pub fn new(label: impl Into<String>, mode: Mode) -> Self {
        Self {
            label: label.into(),
            mode: Some(mode),
            ..Self::default()
        }
    }

    pub fn snapshot(&self, i: u32, j: u32) -> Option<&Tensor> {
        if i == 0 || j == 0 {
            return None;
        }
        self.embeddings.get(i as usize - 1)?.get(j as usize - 1)
    }

    /// Live trainable parameters as a percentage of the backbone.
    pub fn n_param_pct(&self) -> f64 {
        if self.backbone_params == 0 {
            0.0
        } else {
            100.0 * self.trainable_params as f64 / self.backbone_params as f64
        }
    }

    /// Mean fraction of ones in the fold-time masks of task `t`.
    pub fn mask_density(&self, t: u32) -> Option<f64> {
        let folds = self.folds.get(t.checked_sub(1)? as usize)?;
        if folds.is_empty() {
            return None;
        }
        let sum: f64 = folds
            .iter()
            .map(|f| f.mask_ones as f64 / f.cells.max(1) as f64)
            .sum();
        Some(sum / folds.len() as f64)
    }
}

/// Batch plus coordinates of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub batch: &'a ConceptBatch,
    pub task: u32,
    pub step: u64,
}

/// Builds the objective for one step on a fresh tape, without updating.
/// Returns the tape-level total and its breakdown.
pub fn objective<L: Learner>(
    model: &L,
    tape: &Tape,
    input: &StepInput<'_>,
    cfg: &MethodConfig,
) -> Result<(crate::tensor::Var, LossBreakdown)> {
    let mut weights = Vec::new();
    let mut forget = Vec::new();
    let mut sparse = Vec::new();
    for layer in model.layers() {
        let noise = GumbelNoise::Keyed {
            seed: cfg.seed,
            layer: layer.layer_id(),
            task: input.task,
            step: input.step,
        };
        let terms = layer.terms(tape, &noise)?;
        weights.push(terms.weight);
        if cfg.method != Method::Naive {
            forget.push(forgetting_loss(tape, &layer.prior_change_abs(), terms.residual)?);
        }
        if let Some(s) = terms.soft_mask {
            sparse.push(sparsity_loss(tape, s)?);
        }
    }
    let key = StepKey {
        seed: cfg.seed,
        task: input.task,
        step: input.step,
    };
    let task = model.task_loss(tape, &weights, input.batch, key)?;
    let terms = LossTerms {
        task,
        forget: sum_terms(tape, &forget)?,
        sparse: sum_terms(tape, &sparse)?,
    };
    Ok(total_loss(tape, &cfg.effective_weights(), terms)?)
}

/// One optimizer step on every trainable parameter of `model`.
pub fn step<L: Learner>(
    model: &mut L,
    input: &StepInput<'_>,
    cfg: &MethodConfig,
    opt: &mut Optimizer,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    for p in model.params_mut() {
        p.bind(&tape);
    }
    let (total, breakdown) = objective(model, &tape, input, cfg)?;
    let grads = tape.backward(total)?;
    let mut params = model.params_mut();
    let g: Vec<Tensor> = params.iter().map(|p| p.grad(&grads)).collect();
    opt.step(&mut params, &g);
    params.iter_mut().for_each(|p| p.unbind());
    Ok(breakdown)
}

/// Optimizes the current task's parameters for `spec.steps` steps.
pub fn train_task<L: Learner>(
    model: &mut L,
    spec: &TaskSpec,
    cfg: &MethodConfig,
    data: &TaskData,
    log: &mut ContinualLog,
) -> Result<()> {
    cfg.validate()?;
    let expected = log.completed + 1;
    if spec.task != expected || data.task() != spec.task {
        return Err(Error::Sequence {
            expected,
            got: spec.task,
        });
    }
    model.begin_task(spec, cfg)?;
    let live: usize = model.layers().iter().map(|l| l.trainable_count()).sum::<usize>()
        + model.task_param_count();
    log.trainable_params = log.trainable_params.max(live);
    log.backbone_params = model.backbone_param_count();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut curve = Vec::with_capacity(spec.steps);
    for s in 0..spec.steps as u64 {
        let mut r = rng::keyed(cfg.seed, &[domain::BATCH, u64::from(spec.task), s, 0]);
        let batch = data.sample(spec.batch_size, &mut r);
        let input = StepInput {
            batch: &batch,
            task: spec.task,
            step: s,
        };
        curve.push(step(model, &input, cfg, &mut opt)?);
    }
    log.losses.push(curve);
    Ok(())
}

/// Folds every layer, freezes the token and records boundary snapshots.
pub fn end_task<L: Learner>(
    model: &mut L,
    spec: &TaskSpec,
    ctx: &EvalContext<'_>,
    log: &mut ContinualLog,
) -> Result<()> {
    let expected = log.completed + 1;
    if spec.task != expected || log.losses.len() != expected as usize {
        return Err(Error::Sequence {
            expected,
            got: spec.task,
        });
    }
    let folds = model
        .layers_mut()
        .iter_mut()
        .map(|l| l.fold())
        .collect::<Result<Vec<_>>>()?;
    model.finish_task(spec)?;
    let mut embedded = Vec::new();
    let mut acc = Vec::new();
    for j in 1..=spec.task {
        match model.snapshot(j, spec.task, ctx)? {
            Snapshot::Embedded(x) => embedded.push(x),
            Snapshot::Accuracy(a) => acc.push(a),
        }
    }
    if !embedded.is_empty() {
        log.embeddings.push(embedded);
    }
    if !acc.is_empty() {
        log.accuracy.push(acc);
    }
    log.distances
        .push(model.layers().iter().map(|l| l.distance_from_init()).collect());
    log.folds.push(folds);
    log.completed = spec.task;
    Ok(())
}

/// Trains and folds every task in order. Each task's training split is
/// requested from `source` exactly once, right before it is trained.
pub fn run_sequence<L: Learner, S: TaskSource + ?Sized>(
    model: &mut L,
    specs: &[TaskSpec],
    cfg: &MethodConfig,
    source: &mut S,
    ctx: &EvalContext<'_>,
) -> Result<ContinualLog> {
    let mut log = ContinualLog::new(cfg.label(), model.mode());
    resume_sequence(model, specs, cfg, source, ctx, &mut log, |_, _| Ok(()))
        .map(|()| log)
}

/// Continues a sequence from `log.completed`, calling `after_task` once each
/// task is folded (for checkpointing).
pub fn resume_sequence<L, S, F>(
    model: &mut L,
    specs: &[TaskSpec],
    cfg: &MethodConfig,
    source: &mut S,
    ctx: &EvalContext<'_>,
    log: &mut ContinualLog,
    mut after_task: F,
) -> Result<()>
where
    L: Learner,
    S: TaskSource + ?Sized,
    F: FnMut(&L, &ContinualLog) -> Result<()>,
{
    cfg.validate()?;
    for (i, s) in specs.iter().enumerate() {
        if s.task as usize != i + 1 {
            return Err(Error::Sequence {
                expected: i as u32 + 1,
                got: s.task,
            });
        }
    }
    for spec in &specs[log.completed as usize..] {
        let data = source.open(spec.task)?;
        train_task(model, spec, cfg, &data, log)?;
        drop(data);
        end_task(model, spec, ctx, log)?;
        after_task(model, log)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablations_need_stamina() {
        let c = MethodConfig::new(Method::Clora, 0).with_ablation(Ablation::NoMask);
        assert!(c.validate().is_err());
        assert!(MethodConfig::new(Method::Stamina, 0)
            .with_ablation(Ablation::NoMask)
            .validate()
            .is_ok());
    }

    #[test]
    fn ablation_semantics() {
        let base = MethodConfig::new(Method::Stamina, 0);
        assert_eq!(base.adapter_config().mask, MaskKind::Mlp);
        assert_eq!(
            base.clone().with_ablation(Ablation::NoMask).adapter_config().mask,
            MaskKind::Off
        );
        assert_eq!(
            base.clone().with_ablation(Ablation::NoMaskMlp).adapter_config().mask,
            MaskKind::Direct
        );
        assert_eq!(
            base.clone()
                .with_ablation(Ablation::SigmoidInsteadOfGumbel)
                .adapter_config()
                .gate,
            MaskGate::Sigmoid
        );
        assert_eq!(
            base.clone().with_ablation(Ablation::NoTokenMlp).token_kind(),
            TokenKind::Plain
        );
        assert_eq!(
            base.with_ablation(Ablation::NoSparsity).effective_weights().lambda_s,
            0.0
        );
        assert_eq!(MethodConfig::new(Method::Clora, 0).weights.lambda_f, 1e8);
    }

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("lora".parse::<Method>().is_err());
    }
}
