//! A small conditional denoiser: latent `h = [x, time features, 1]·W_in`,
//! then cross-attention blocks over a context of fixed tokens plus one
//! concept token, each followed by a ReLU MLP, all with residuals.
//!
//! Only the key and value projections of the cross-attention are adapted.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AdaptedWeight, EvalContext, Learner, PretrainOptions, Snapshot, StepKey};
use crate::adapters::{ConceptToken, TokenMlp};
use crate::checkpoint::TaskState;
use crate::data::{ConceptBatch, ConceptGenerator, ConceptParams};
use crate::losses::{task_loss, Mode, Target};
use crate::optim::{Optimizer, OptimizerKind};
use crate::param::Param;
use crate::rng::{self, domain};
use crate::tensor::{cross_attention, Tape, Tensor, Var};
use crate::trainer::{MethodConfig, TaskSpec, TokenKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub hidden: usize,
    pub token_dim: usize,
    pub n_context: usize,
    pub n_blocks: usize,
    /// Sine/cosine pairs of the time embedding.
    pub time_pairs: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            data_dim: 16,
            hidden: 32,
            token_dim: 32,
            n_context: 3,
            n_blocks: 2,
            time_pairs: 4,
            diffusion_steps: 10,
            beta_start: 0.05,
            beta_end: 0.7,
        }
    }
}

impl DenoiserConfig {
    pub fn input_dim(&self) -> usize {
        self.data_dim + 2 * self.time_pairs + 1
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.data_dim,
            self.hidden,
            self.token_dim,
            self.n_blocks,
            self.diffusion_steps,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "noise schedule {}..{} must lie in (0, 1)",
                self.beta_start, self.beta_end
            )));
        }
        Ok(())
    }
}

/// Linear variance schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Schedule {
    pub fn linear(cfg: &DenoiserConfig) -> Self {
        let k = cfg.diffusion_steps;
        let betas: Vec<f64> = (0..k)
            .map(|i| {
                if k == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (k - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alpha_bars }
    }
}

/// `[x, sin/cos time features, 1]` rows.
fn features(cfg: &DenoiserConfig, x: &Tensor, steps: &[usize]) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let width = cfg.input_dim();
    let mut out = Vec::with_capacity(n * width);
    for (i, &k) in steps.iter().enumerate() {
        out.extend_from_slice(x.row(i));
        let s = (k + 1) as f64 / cfg.diffusion_steps as f64;
        for p in 0..cfg.time_pairs {
            let w = PI * f64::from(1u32 << p) * s;
            out.push(w.sin());
            out.push(w.cos());
        }
        out.push(1.0);
    }
    debug_assert_eq!(d, cfg.data_dim);
    Tensor::new(vec![n, width], out).expect("feature width")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

/// Frozen pretrained weights plus the fixed context tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserBackbone {
    pub cfg: DenoiserConfig,
    pub w_in: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub w_out: Tensor,
    pub context: Tensor,
}

struct BlockVars {
    wq: Var,
    wk: Var,
    wv: Var,
    w1: Var,
    w2: Var,
}

struct Vars {
    w_in: Var,
    blocks: Vec<BlockVars>,
    w_out: Var,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], (1.0 / rows as f64).sqrt(), rng)
}

fn forward(tape: &Tape, cfg: &DenoiserConfig, w: &Vars, input: Tensor, cond: Var) -> Result<Var> {
    let mut h = tape.matmul(tape.constant(input), w.w_in)?;
    for b in &w.blocks {
        let a = cross_attention(tape, h, cond, b.wq, b.wk, b.wv, cfg.hidden)?;
        h = tape.add(h, a)?;
        let m = tape.relu(tape.matmul(h, b.w1)?)?;
        let m = tape.matmul(m, b.w2)?;
        h = tape.add(h, m)?;
    }
    Ok(tape.matmul(h, w.w_out)?)
}

/// Noisy inputs and the noise to predict for a batch of clean samples.
fn noised(
    cfg: &DenoiserConfig,
    sched: &Schedule,
    x0: &Tensor,
    rng: &mut impl Rng,
) -> (Tensor, Tensor) {
    let n = x0.rows();
    let d = cfg.data_dim;
    let mut steps = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n * d);
    let mut xk = Vec::with_capacity(n * d);
    for i in 0..n {
        let k = rng.random_range(0..cfg.diffusion_steps);
        steps.push(k);
        let ab = sched.alpha_bars[k];
        for &x in x0.row(i) {
            let e: f64 = rng.sample(StandardNormal);
            eps.push(e);
            xk.push(ab.sqrt() * x + (1.0 - ab).sqrt() * e);
        }
    }
    let xk = Tensor::new(vec![n, d], xk).expect("batch shape");
    (
        features(cfg, &xk, &steps),
        Tensor::new(vec![n, d], eps).expect("batch shape"),
    )
}

impl DenoiserBackbone {
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::keyed(seed, &[domain::BACKBONE, 0]);
        let (h, t) = (cfg.hidden, cfg.token_dim);
        let w_in = glorot(cfg.input_dim(), h, &mut r);
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockWeights {
                wq: glorot(h, h, &mut r),
                wk: glorot(t, h, &mut r),
                wv: glorot(t, h, &mut r),
                w1: glorot(h, h, &mut r),
                w2: glorot(h, h, &mut r).scale(0.5),
            })
            .collect();
        let w_out = glorot(h, cfg.data_dim, &mut r);
        let context = Tensor::randn(&[cfg.n_context, t], 1.0, &mut r);
        Ok(Self {
            cfg,
            w_in,
            blocks,
            w_out,
            context,
        })
    }

    /// Trains every backbone weight on generic concepts, each conditioned on
    /// its own fixed random token.
    pub fn pretrain(cfg: DenoiserConfig, gen: &ConceptGenerator, opts: &PretrainOptions) -> Result<Self> {
        let mut bb = Self::init(cfg, opts.seed)?;
        if gen.width() != cfg.data_dim {
            return Err(Error::Config(format!(
                "generator width {} differs from data dim {}",
                gen.width(),
                cfg.data_dim
            )));
        }
        let concepts: Vec<ConceptParams> = (0..opts.concepts as u64)
            .map(|i| gen.concept(domain::BACKBONE, rng::mix(opts.seed, &[i]), 0))
            .collect();
        let mut tr = rng::keyed(opts.seed, &[domain::BACKBONE, 1]);
        let tokens: Vec<Tensor> = concepts
            .iter()
            .map(|_| Tensor::randn(&[1, cfg.token_dim], 1.0, &mut tr))
            .collect();
        let sched = Schedule::linear(&cfg);
        let mut params = bb.to_params();
        let mut opt = Optimizer::new(OptimizerKind::Adam, opts.lr);
        for step in 0..opts.steps as u64 {
            let mut r = rng::keyed(opts.seed, &[domain::BACKBONE, 2, step]);
            let c = r.random_range(0..concepts.len());
            let (x0, _) = concepts[c].sample(opts.batch, &mut r);
            let (input, eps) = noised(&cfg, &sched, &x0, &mut r);
            let tape = Tape::new();
            let vars: Vec<Var> = params.iter_mut().map(|p| p.bind(&tape)).collect();
            let w = Self::vars_from(&vars, cfg.n_blocks);
            let cond = tape.constant(Tensor::concat_rows(&[&bb.context, &tokens[c]])?);
            let pred = forward(&tape, &cfg, &w, input, cond)?;
            let loss = task_loss(&tape, pred, Target::Values(&eps))?;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = params.iter().map(|p| p.grad(&grads)).collect();
            let mut refs: Vec<&mut Param> = params.iter_mut().collect();
            opt.step(&mut refs, &g);
        }
        bb.load_params(params);
        Ok(bb)
    }

    fn to_params(&self) -> Vec<Param> {
        let mut v = vec![Param::new(self.w_in.clone())];
        for b in &self.blocks {
            for t in [&b.wq, &b.wk, &b.wv, &b.w1, &b.w2] {
                v.push(Param::new(t.clone()));
            }
        }
        v.push(Param::new(self.w_out.clone()));
        v
    }

    fn load_params(&mut self, params: Vec<Param>) {
        let mut it = params.into_iter().map(|p| p.value().clone());
        self.w_in = it.next().expect("w_in");
        for b in &mut self.blocks {
            b.wq = it.next().expect("wq");
            b.wk = it.next().expect("wk");
            b.wv = it.next().expect("wv");
            b.w1 = it.next().expect("w1");
            b.w2 = it.next().expect("w2");
        }
        self.w_out = it.next().expect("w_out");
    }

    fn vars_from(v: &[Var], n_blocks: usize) -> Vars {
        Vars {
            w_in: v[0],
            blocks: (0..n_blocks)
                .map(|b| {
                    let o = 1 + 5 * b;
                    BlockVars {
                        wq: v[o],
                        wk: v[o + 1],
                        wv: v[o + 2],
                        w1: v[o + 3],
                        w2: v[o + 4],
                    }
                })
                .collect(),
            w_out: v[v.len() - 1],
        }
    }

    /// Frozen weights as constants, with the adapted K,V projections taken
    /// from `kv` (two per block).
    fn vars_with(&self, tape: &Tape, kv: &[Var]) -> Vars {
        Vars {
            w_in: tape.constant(self.w_in.clone()),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| BlockVars {
                    wq: tape.constant(b.wq.clone()),
                    wk: kv[2 * i],
                    wv: kv[2 * i + 1],
                    w1: tape.constant(b.w1.clone()),
                    w2: tape.constant(b.w2.clone()),
                })
                .collect(),
            w_out: tape.constant(self.w_out.clone()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.to_params().iter().map(Param::numel).sum()
    }

    /// Predicted noise for rows `x` at diffusion steps `steps`.
    pub fn predict(&self, kv: &[Tensor], x: &Tensor, steps: &[usize], token: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let kv: Vec<Var> = kv.iter().map(|t| tape.constant(t.clone())).collect();
        let w = self.vars_with(&tape, &kv);
        let cond = tape.constant(Tensor::concat_rows(&[&self.context, token])?);
        let out = forward(&tape, &self.cfg, &w, features(&self.cfg, x, steps), cond)?;
        Ok(tape.value(out))
    }

    /// Ancestral sampling from seeded Gaussian noise.
    pub fn sample(&self, kv: &[Tensor], token: &Tensor, n: usize, seed: u64) -> Result<Tensor> {
        let d = self.cfg.data_dim;
        if n == 0 {
            return Ok(Tensor::zeros(&[0, d]));
        }
        let sched = Schedule::linear(&self.cfg);
        let mut r = rng::keyed(seed, &[]);
        let mut x = Tensor::randn(&[n, d], 1.0, &mut r);
        for k in (0..self.cfg.diffusion_steps).rev() {
            let eps = self.predict(kv, &x, &vec![k; n], token)?;
            let (b, ab) = (sched.betas[k], sched.alpha_bars[k]);
            let c = b / (1.0 - ab).sqrt();
            let inv = 1.0 / (1.0 - b).sqrt();
            let sigma = if k > 0 {
                (b * (1.0 - sched.alpha_bars[k - 1]) / (1.0 - ab)).sqrt()
            } else {
                0.0
            };
            let z = Tensor::randn(&[n, d], 1.0, &mut r);
            x = x.zip_map(&eps, "ddpm", |xv, e| inv * (xv - c * e))?;
            if sigma > 0.0 {
                x = x.zip_map(&z, "ddpm", |xv, zv| xv + sigma * zv)?;
            }
        }
        Ok(x)
    }
}

/// A denoiser whose K,V projections are adapted task by task.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    backbone: Arc<DenoiserBackbone>,
    layers: Vec<AdaptedWeight>,
    live: Option<ConceptToken>,
    tokens: BTreeMap<u32, Tensor>,
    sched: Schedule,
}

impl DenoiserModel {
    pub fn new(backbone: Arc<DenoiserBackbone>, cfg: &MethodConfig) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, b) in backbone.blocks.iter().enumerate() {
            let i = i as u32;
            layers.push(AdaptedWeight::for_method(2 * i, b.wk.clone(), cfg)?);
            layers.push(AdaptedWeight::for_method(2 * i + 1, b.wv.clone(), cfg)?);
        }
        let sched = Schedule::linear(&backbone.cfg);
        Ok(Self {
            backbone,
            layers,
            live: None,
            tokens: BTreeMap::new(),
            sched,
        })
    }

    pub fn backbone(&self) -> &DenoiserBackbone {
        &self.backbone
    }

    /// Materialized token embeddings of finished concepts.
    pub fn tokens(&self) -> &BTreeMap<u32, Tensor> {
        &self.tokens
    }

    pub fn set_tokens(&mut self, tokens: BTreeMap<u32, Tensor>) {
        self.tokens = tokens;
    }

    pub fn live_token(&self) -> Option<&ConceptToken> {
        self.live.as_ref()
    }

    pub fn restore_layers(&mut self, layers: Vec<AdaptedWeight>) {
        self.layers = layers;
    }

    fn deployed(&self) -> Vec<Tensor> {
        self.layers.iter().map(|l| l.deployed().clone()).collect()
    }

    /// Samples for a finished concept from the deployed (folded) weights.
    pub fn generate(&self, concept: u32, n: usize, seed: u64) -> Result<Tensor> {
        let token = self.tokens.get(&concept).ok_or(Error::UnknownConcept(concept))?;
        self.backbone.sample(&self.deployed(), token, n, seed)
    }

    /// Samples with an explicit token, bypassing the concept table.
    pub fn generate_with_token(&self, token: &Tensor, n: usize, seed: u64) -> Result<Tensor> {
        self.backbone.sample(&self.deployed(), token, n, seed)
    }
}

/// Seed of the generation stream for concept `j`; identical at every task
/// boundary so a frozen model reproduces its samples.
pub(crate) fn generation_seed(seed: u64, concept: u32) -> u64 {
    rng::mix(seed, &[domain::GENERATE, u64::from(concept)])
}

impl Learner for DenoiserModel {
    fn mode(&self) -> Mode {
        Mode::Denoiser
    }

    fn layers(&self) -> &[AdaptedWeight] {
        &self.layers
    }

    fn layers_mut(&mut self) -> &mut [AdaptedWeight] {
        &mut self.layers
    }

    fn begin_task(&mut self, spec: &TaskSpec, cfg: &MethodConfig) -> Result<()> {
        let dim = self.backbone.cfg.token_dim;
        self.live = Some(match cfg.token_kind() {
            TokenKind::Mlp => {
                let mut r = rng::keyed(cfg.seed, &[domain::TOKEN_INIT, u64::from(spec.task)]);
                ConceptToken::Mlp(TokenMlp::init(dim, &mut r))
            }
            TokenKind::Plain => ConceptToken::plain(dim),
        });
        Ok(())
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        if let Some(t) = self.live.as_mut() {
            out.extend(t.params_mut());
        }
        out
    }

    fn task_param_count(&self) -> usize {
        self.live.as_ref().map_or(0, ConceptToken::numel)
    }

    fn task_loss(&self, tape: &Tape, weights: &[Var], batch: &ConceptBatch, key: StepKey) -> Result<Var> {
        let token = self
            .live
            .as_ref()
            .ok_or(Error::Config("no task in progress".into()))?
            .embed(tape)?;
        let cfg = &self.backbone.cfg;
        let mut r = rng::keyed(key.seed, &[domain::BATCH, u64::from(key.task), key.step, 1]);
        let (input, eps) = noised(cfg, &self.sched, &batch.x, &mut r);
        let w = self.backbone.vars_with(tape, weights);
        let cond = tape.concat_rows(&[tape.constant(self.backbone.context.clone()), token])?;
        let pred = forward(tape, cfg, &w, input, cond)?;
        Ok(task_loss(tape, pred, Target::Values(&eps))?)
    }

    fn finish_task(&mut self, spec: &TaskSpec) -> Result<()> {
        let token = self
            .live
            .take()
            .ok_or(Error::Config("no task in progress".into()))?;
        self.tokens.insert(spec.task, token.materialize()?);
        Ok(())
    }

    fn snapshot(&self, task: u32, _current: u32, ctx: &EvalContext<'_>) -> Result<Snapshot> {
        let x = self.generate(task, ctx.gen_samples, generation_seed(ctx.gen_seed, task))?;
        Ok(Snapshot::Embedded(ctx.embedder.embed(&x)?))
    }

    fn backbone_param_count(&self) -> usize {
        self.backbone.param_count()
    }

    fn task_state(&self) -> TaskState {
        TaskState {
            tokens: self.tokens.clone(),
            ..TaskState::default()
        }
    }

    fn restore_task_state(&mut self, state: TaskState) -> Result<()> {
        let width = self.backbone.cfg.token_dim;
        if let Some((t, _)) = state.tokens.iter().find(|(_, v)| v.shape() != [1, width]) {
            return Err(Error::Config(format!("token of task {t} is not 1x{width}")));
        }
        self.tokens = state.tokens;
        self.live = None;
        Ok(())
    }
}
