//! A single self-attention block over short token sequences, mean-pooled
//! into a linear head. The Q, K and V projections are adapted.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AdaptedWeight, EvalContext, Learner, PretrainOptions, Snapshot, StepKey};
use crate::checkpoint::TaskState;
use crate::data::{ConceptBatch, ConceptGenerator, ConceptParams};
use crate::losses::{task_loss, Mode, Target};
use crate::optim::{Optimizer, OptimizerKind};
use crate::param::Param;
use crate::rng::{self, domain};
use crate::tensor::{cross_attention, Tape, Tensor, Var};
use crate::trainer::{HeadKind, MethodConfig, TaskSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub dim: usize,
    pub seq_len: usize,
    /// Classes over the whole task sequence.
    pub n_classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            seq_len: 4,
            n_classes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierBackbone {
    pub cfg: ClassifierConfig,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

/// Pooled features `[B×dim]` for a batch of flattened sequences.
fn pooled(tape: &Tape, cfg: &ClassifierConfig, qkv: &[Var], x: &Tensor) -> Result<Var> {
    let (n, width) = (x.rows(), x.cols());
    if width != cfg.dim * cfg.seq_len {
        return Err(crate::tensor::TensorError::Shape {
            op: "classifier input",
            lhs: x.shape().to_vec(),
            rhs: vec![cfg.seq_len, cfg.dim],
        }
        .into());
    }
    let avg = tape.constant(Tensor::full(&[1, cfg.seq_len], 1.0 / cfg.seq_len as f64));
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let s = tape.constant(Tensor::new(vec![cfg.seq_len, cfg.dim], x.row(i).to_vec())?);
        let a = cross_attention(tape, s, s, qkv[0], qkv[1], qkv[2], cfg.dim)?;
        let h = tape.add(s, a)?;
        rows.push(tape.matmul(avg, h)?);
    }
    Ok(tape.concat_rows(&rows)?)
}

impl ClassifierBackbone {
    pub fn init(cfg: ClassifierConfig, seed: u64) -> Self {
        let mut r = rng::keyed(seed, &[domain::BACKBONE, 10]);
        let s = (1.0 / cfg.dim as f64).sqrt();
        Self {
            cfg,
            wq: Tensor::randn(&[cfg.dim, cfg.dim], s, &mut r),
            wk: Tensor::randn(&[cfg.dim, cfg.dim], s, &mut r),
            wv: Tensor::randn(&[cfg.dim, cfg.dim], s, &mut r),
        }
    }

    /// Trains Q, K, V with a throwaway head on generic classes.
    pub fn pretrain(cfg: ClassifierConfig, gen: &ConceptGenerator, opts: &PretrainOptions) -> Result<Self> {
        if gen.width() != cfg.dim * cfg.seq_len {
            return Err(Error::Config("generator width differs from sequence width".into()));
        }
        let mut bb = Self::init(cfg, opts.seed);
        let concepts: Vec<ConceptParams> = (0..opts.concepts)
            .map(|i| {
                gen.concept(
                    domain::BACKBONE,
                    rng::mix(opts.seed, &[i as u64]),
                    i * gen.classes_per_task,
                )
            })
            .collect();
        let n_generic = opts.concepts * gen.classes_per_task;
        let mut params = vec![
            Param::new(bb.wq.clone()),
            Param::new(bb.wk.clone()),
            Param::new(bb.wv.clone()),
            Param::new(Tensor::zeros(&[cfg.dim, n_generic])),
        ];
        let mut opt = Optimizer::new(OptimizerKind::Adam, opts.lr);
        for step in 0..opts.steps as u64 {
            let mut r = rng::keyed(opts.seed, &[domain::BACKBONE, 11, step]);
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for _ in 0..opts.batch {
                let c = r.random_range(0..concepts.len());
                let (x, y) = concepts[c].sample(gen.classes_per_task, &mut r);
                let k = r.random_range(0..gen.classes_per_task);
                xs.push(Tensor::new(vec![1, x.cols()], x.row(k).to_vec())?);
                ys.push(y[k]);
            }
            let refs: Vec<&Tensor> = xs.iter().collect();
            let x = Tensor::concat_rows(&refs)?;
            let tape = Tape::new();
            let v: Vec<Var> = params.iter_mut().map(|p| p.bind(&tape)).collect();
            let feats = pooled(&tape, &cfg, &v[..3], &x)?;
            let logits = tape.matmul(feats, v[3])?;
            let loss = task_loss(&tape, logits, Target::Classes(&ys))?;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = params.iter().map(|p| p.grad(&grads)).collect();
            let mut refs: Vec<&mut Param> = params.iter_mut().collect();
            opt.step(&mut refs, &g);
        }
        bb.wq = params[0].value().clone();
        bb.wk = params[1].value().clone();
        bb.wv = params[2].value().clone();
        Ok(bb)
    }

    pub fn param_count(&self) -> usize {
        3 * self.cfg.dim * self.cfg.dim
    }
}

/// Classifier with adapted QKV and a head shared across tasks.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    backbone: Arc<ClassifierBackbone>,
    layers: Vec<AdaptedWeight>,
    head: Param,
    head_kind: HeadKind,
    seen: Vec<usize>,
    current: Vec<usize>,
}

impl ClassifierModel {
    pub fn new(backbone: Arc<ClassifierBackbone>, cfg: &MethodConfig) -> Result<Self> {
        let layers = [&backbone.wq, &backbone.wk, &backbone.wv]
            .into_iter()
            .enumerate()
            .map(|(i, w)| AdaptedWeight::for_method(i as u32, w.clone(), cfg))
            .collect::<Result<Vec<_>>>()?;
        let c = backbone.cfg;
        Ok(Self {
            head: Param::new(Tensor::zeros(&[c.dim, c.n_classes])),
            backbone,
            layers,
            head_kind: cfg.head_kind(),
            seen: Vec::new(),
            current: Vec::new(),
        })
    }

    pub fn head(&self) -> &Tensor {
        self.head.value()
    }

    /// Predicted classes among those seen so far, from deployed weights.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let qkv: Vec<Var> = self.layers.iter().map(|l| tape.constant(l.deployed().clone())).collect();
        let feats = pooled(&tape, &self.backbone.cfg, &qkv, x)?;
        let logits = tape.value(tape.matmul(feats, tape.constant(self.head.value().clone()))?);
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = self.seen[0];
                for &c in &self.seen[1..] {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}

impl Learner for ClassifierModel {
    fn mode(&self) -> Mode {
        Mode::Classifier
    }

    fn layers(&self) -> &[AdaptedWeight] {
        &self.layers
    }

    fn layers_mut(&mut self) -> &mut [AdaptedWeight] {
        &mut self.layers
    }

    fn begin_task(&mut self, spec: &TaskSpec, _cfg: &MethodConfig) -> Result<()> {
        if let Some(&c) = spec.concept.classes.iter().find(|&&c| c >= self.backbone.cfg.n_classes) {
            return Err(Error::Config(format!(
                "class {c} exceeds the head width {}",
                self.backbone.cfg.n_classes
            )));
        }
        self.current = spec.concept.classes.clone();
        for &c in &self.current {
            if !self.seen.contains(&c) {
                self.seen.push(c);
            }
        }
        Ok(())
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        out.push(&mut self.head);
        out
    }

    fn task_param_count(&self) -> usize {
        self.head.numel()
    }

    fn task_loss(&self, tape: &Tape, weights: &[Var], batch: &ConceptBatch, _key: StepKey) -> Result<Var> {
        let feats = pooled(tape, &self.backbone.cfg, weights, &batch.x)?;
        let logits = tape.matmul(feats, self.head.var(tape))?;
        let active = match self.head_kind {
            HeadKind::CurrentTask => &self.current,
            HeadKind::Seen => &self.seen,
        };
        let local: Vec<usize> = batch
            .labels
            .iter()
            .map(|y| {
                active
                    .iter()
                    .position(|c| c == y)
                    .ok_or(Error::Config(format!("label {y} is not an active class")))
            })
            .collect::<Result<_>>()?;
        let logits = tape.select_cols(logits, active)?;
        Ok(task_loss(tape, logits, Target::Classes(&local))?)
    }

    fn finish_task(&mut self, _spec: &TaskSpec) -> Result<()> {
        self.current.clear();
        Ok(())
    }

    fn snapshot(&self, task: u32, _current: u32, ctx: &EvalContext<'_>) -> Result<Snapshot> {
        let data = ctx
            .eval
            .iter()
            .find(|d| d.task == task)
            .ok_or(Error::UnknownConcept(task))?;
        let pred = self.predict(&data.eval)?;
        let correct = pred.iter().zip(&data.eval_labels).filter(|(p, y)| p == y).count();
        Ok(Snapshot::Accuracy(100.0 * correct as f64 / pred.len() as f64))
    }

    fn backbone_param_count(&self) -> usize {
        self.backbone.param_count()
    }

    fn task_state(&self) -> TaskState {
        TaskState {
            head: Some(self.head.value().clone()),
            seen: self.seen.clone(),
            ..TaskState::default()
        }
    }

    fn restore_task_state(&mut self, state: TaskState) -> Result<()> {
        let head = state
            .head
            .ok_or(Error::Config("classifier checkpoint without a head".into()))?;
        if head.shape() != self.head.value().shape() {
            return Err(Error::Config(format!("head of shape {:?}", head.shape())));
        }
        self.head.set(head);
        self.seen = state.seen;
        self.current.clear();
        Ok(())
    }
}
