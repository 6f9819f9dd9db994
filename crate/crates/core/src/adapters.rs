//! Stackable low-rank residuals gated by learned hard masks.
//!
//! An [`AdaptedLinear`] holds one projection weight as
//! `W_prev + (A·B) ⊙ M`, where `W_prev` already contains every folded task
//! and `M` is a `D1×D2` mask. The mask comes from a two-layer perceptron on
//! an all-ones input producing `D1×D2×2` logits, relaxed with Gumbel-Softmax
//! over the trailing size-2 axis. Channel 1 means "pass through".
//!
//! In hard mode the forward mask is the exact argmax indicator and the
//! backward pass uses the soft relaxation (straight-through). At the end of a
//! task the residual is folded into `W_prev` using the noise-free argmax of
//! the logits, so the deployed layer has exactly the base parameter count.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::param::Param;
use crate::rng::{self, domain};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Standard deviation of the Gaussian used for `A` and mask-MLP layer 1.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdapterError {
    #[error("invalid adapter configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AdapterError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub tau: f64,
    /// Straight-through hard forward when set, plain soft relaxation otherwise.
    pub hard: bool,
    pub seed: u64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            hard: true,
            seed: 0,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(AdapterError::Config(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Source of the Gumbel noise added to one mask draw.
#[derive(Debug, Clone, PartialEq)]
pub enum GumbelNoise {
    /// Fresh noise from the stream keyed by `(seed, layer, task, step)`.
    Keyed {
        seed: u64,
        layer: u32,
        task: u32,
        step: u64,
    },
    /// Pinned noise, mainly for tests and gradient checks.
    Fixed(Tensor),
    Zero,
}

impl GumbelNoise {
    pub fn tensor(&self, shape: &[usize]) -> Result<Tensor> {
        match self {
            GumbelNoise::Keyed {
                seed,
                layer,
                task,
                step,
            } => {
                let mut rng = rng::keyed(
                    *seed,
                    &[domain::GUMBEL, u64::from(*layer), u64::from(*task), *step],
                );
                Ok(sample_gumbel(shape, &mut rng))
            }
            GumbelNoise::Fixed(t) => {
                if t.shape() != shape {
                    return Err(TensorError::Shape {
                        op: "gumbel_noise",
                        lhs: t.shape().to_vec(),
                        rhs: shape.to_vec(),
                    }
                    .into());
                }
                Ok(t.clone())
            }
            GumbelNoise::Zero => Ok(Tensor::zeros(shape)),
        }
    }
}

/// `g = −ln(−ln u)` with `u` uniform on the open unit interval.
pub fn sample_gumbel<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sample length matches shape")
}

/// A boolean `D1×D2` matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(AdapterError::Config(format!(
                "mask of {rows}x{cols} needs {} bits, got {}",
                rows * cols,
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    /// Positions where `t` is non-zero.
    pub fn nonzero(t: &Tensor) -> Result<Self> {
        let (r, c) = t.dims2("mask")?;
        Ok(Self {
            rows: r,
            cols: c,
            bits: t.data().iter().map(|&v| v != 0.0).collect(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count_ones() as f64 / self.bits.len() as f64
        }
    }

    pub fn union_with(&mut self, other: &Mask) {
        assert_eq!(self.shape(), other.shape(), "mask union shape mismatch");
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.rows, self.cols],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask length matches shape")
    }
}

/// The mask-generating perceptron: `relu(1ᵀ·L1)·L2` reshaped to `D1×D2×2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskMlp {
    l1: Param,
    l2: Param,
    d1: usize,
    d2: usize,
}

impl MaskMlp {
    /// `L1 ~ N(0, 0.02²)`, `L2 = 0`: logits start at exactly zero.
    pub fn init<R: Rng + ?Sized>(rank: usize, d1: usize, d2: usize, rng: &mut R) -> Self {
        Self {
            l1: Param::new(Tensor::randn(&[rank, rank], INIT_STD, rng)),
            l2: Param::new(Tensor::zeros(&[rank, d1 * d2 * 2])),
            d1,
            d2,
        }
    }

    pub fn from_weights(l1: Tensor, l2: Tensor, d1: usize, d2: usize) -> Result<Self> {
        let (r, r2) = l1.dims2("mask_mlp")?;
        let (r3, out) = l2.dims2("mask_mlp")?;
        if r != r2 || r3 != r || out != d1 * d2 * 2 {
            return Err(AdapterError::Config(format!(
                "mask MLP layers {:?} and {:?} do not produce {d1}x{d2}x2 logits",
                l1.shape(),
                l2.shape()
            )));
        }
        Ok(Self {
            l1: Param::new(l1),
            l2: Param::new(l2),
            d1,
            d2,
        })
    }

    pub fn rank(&self) -> usize {
        self.l1.value().rows()
    }

    pub fn l1(&self) -> &Tensor {
        self.l1.value()
    }

    pub fn l2(&self) -> &Tensor {
        self.l2.value()
    }

    pub fn logits(&self, tape: &Tape) -> Result<Var> {
        let ones = tape.constant(Tensor::ones(&[1, self.rank()]));
        let hidden = tape.matmul(ones, self.l1.var(tape))?;
        let hidden = tape.relu(hidden)?;
        let out = tape.matmul(hidden, self.l2.var(tape))?;
        Ok(tape.reshape(out, &[self.d1, self.d2, 2])?)
    }

    pub fn logits_value(&self) -> Result<Tensor> {
        let hidden = Tensor::ones(&[1, self.rank()])
            .matmul(self.l1.value())?
            .map(|v| v.max(0.0));
        Ok(hidden.matmul(self.l2.value())?.reshape(&[self.d1, self.d2, 2])?)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.l1, &mut self.l2]
    }

    pub fn numel(&self) -> usize {
        self.l1.numel() + self.l2.numel()
    }
}

/// Mask logits of `m` recorded on `tape`.
pub fn mask_logits(tape: &Tape, m: &MaskMlp) -> Result<Var> {
    m.logits(tape)
}

/// Forward mask and the soft relaxation behind it.
#[derive(Debug, Clone, Copy)]
pub struct GumbelMask {
    /// Hard indicator (straight-through) or the soft value, per config.
    pub mask: Var,
    pub soft: Var,
}

fn check_logits(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        &[d1, d2, 2] => Ok((d1, d2)),
        _ => Err(TensorError::Rank {
            op: "mask logits (expected D1×D2×2)",
            expected: 3,
            got: shape.to_vec(),
        }
        .into()),
    }
}

/// Two-way Gumbel-Softmax over the trailing axis of `logits[D1×D2×2]`,
/// returning channel 1 as a `D1×D2` mask.
pub fn gumbel_softmax_mask(
    tape: &Tape,
    logits: Var,
    cfg: &GumbelConfig,
    noise: &GumbelNoise,
) -> Result<GumbelMask> {
    cfg.validate()?;
    let shape = tape.shape(logits);
    let (d1, d2) = check_logits(&shape)?;
    let g = noise.tensor(&shape)?;
    let perturbed = tape.add(logits, tape.constant(g))?;
    let z = tape.scale(perturbed, 1.0 / cfg.tau)?;
    let pairs = tape.reshape(z, &[d1 * d2, 2])?;
    let probs = tape.softmax(pairs, 1)?;
    let pass = tape.select_cols(probs, &[1])?;
    let soft = tape.reshape(pass, &[d1, d2])?;
    if !cfg.hard {
        return Ok(GumbelMask { mask: soft, soft });
    }
    let zv = tape.value(perturbed);
    let hard = Tensor::new(
        vec![d1, d2],
        zv.data()
            .chunks_exact(2)
            .map(|p| if p[1] > p[0] { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let mask = tape.straight_through(soft, hard)?;
    Ok(GumbelMask { mask, soft })
}

/// Noise-free argmax of the logits; ties resolve to 0.
pub fn deterministic_mask(logits: &Tensor) -> Result<Mask> {
    let (d1, d2) = check_logits(logits.shape())?;
    let bits = logits.data().chunks_exact(2).map(|p| p[1] > p[0]).collect();
    Mask::from_bits(d1, d2, bits)
}

/// Custom-token perceptron: `relu(1ᵀ·L1)·L2`, both layers `D×D`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenMlp {
    l1: Param,
    l2: Param,
}

impl TokenMlp {
    /// `L1 ~ N(0, 1/D)`, `L2 = 0`: the embedding starts at zero.
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            l1: Param::new(Tensor::randn(&[dim, dim], 1.0 / (dim as f64).sqrt(), rng)),
            l2: Param::new(Tensor::zeros(&[dim, dim])),
        }
    }

    pub fn from_weights(l1: Tensor, l2: Tensor) -> Result<Self> {
        let (a, b) = l1.dims2("token_mlp")?;
        let (c, d) = l2.dims2("token_mlp")?;
        if a != b || c != d || a != c {
            return Err(AdapterError::Config(format!(
                "token MLP layers must both be DxD, got {:?} and {:?}",
                l1.shape(),
                l2.shape()
            )));
        }
        Ok(Self {
            l1: Param::new(l1),
            l2: Param::new(l2),
        })
    }

    pub fn dim(&self) -> usize {
        self.l1.value().rows()
    }

    pub fn embed(&self, tape: &Tape) -> Result<Var> {
        let ones = tape.constant(Tensor::ones(&[1, self.dim()]));
        let h = tape.matmul(ones, self.l1.var(tape))?;
        let h = tape.relu(h)?;
        Ok(tape.matmul(h, self.l2.var(tape))?)
    }

    pub fn embed_value(&self) -> Result<Tensor> {
        let h = Tensor::ones(&[1, self.dim()])
            .matmul(self.l1.value())?
            .map(|v| v.max(0.0));
        Ok(h.matmul(self.l2.value())?)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.l1, &mut self.l2]
    }

    pub fn numel(&self) -> usize {
        self.l1.numel() + self.l2.numel()
    }
}

/// Token embedding `[1×D]` produced by `tok`.
pub fn token_embed(tape: &Tape, tok: &TokenMlp) -> Result<Var> {
    tok.embed(tape)
}

/// The learnable conditioning token of the active concept.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ConceptToken {
    Mlp(TokenMlp),
    /// A directly learned `[1×D]` vector.
    Plain(Param),
}

impl ConceptToken {
    pub fn plain(dim: usize) -> Self {
        ConceptToken::Plain(Param::new(Tensor::zeros(&[1, dim])))
    }

    pub fn embed(&self, tape: &Tape) -> Result<Var> {
        match self {
            ConceptToken::Mlp(m) => m.embed(tape),
            ConceptToken::Plain(p) => Ok(p.var(tape)),
        }
    }

    /// The static embedding stored once the task is finished.
    pub fn materialize(&self) -> Result<Tensor> {
        match self {
            ConceptToken::Mlp(m) => m.embed_value(),
            ConceptToken::Plain(p) => Ok(p.value().clone()),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            ConceptToken::Mlp(m) => m.params_mut(),
            ConceptToken::Plain(p) => vec![p],
        }
    }

    pub fn numel(&self) -> usize {
        match self {
            ConceptToken::Mlp(m) => m.numel(),
            ConceptToken::Plain(p) => p.numel(),
        }
    }
}

/// How mask logits are parameterised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Mlp,
    /// A directly learned `D1×D2×2` logit tensor.
    Direct,
    /// No mask: the residual passes unchanged.
    Off,
}

/// How logits become a mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaskGate {
    Gumbel(GumbelConfig),
    /// `sigmoid` of the channel-1 logits: no noise, no hard forward.
    Sigmoid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum MaskParam {
    Mlp(MaskMlp),
    Direct(Param),
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub mask: MaskKind,
    pub gate: MaskGate,
    /// Keys the per-task initialisation stream.
    pub init_seed: u64,
}

/// Per-step view of an adapted layer recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerTerms {
    pub weight: Var,
    /// The live residual actually added to `W_prev`.
    pub residual: Var,
    /// Differentiable mask values that the sparsity penalty acts on.
    pub soft_mask: Option<Var>,
}

/// What a fold changed in one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub layer: u32,
    /// Non-zero entries of the folded `ΔW`.
    pub support: usize,
    /// Entries of that support never modified by an earlier fold.
    pub novel: usize,
    /// Ones in the fold-time mask.
    pub mask_ones: usize,
    pub cells: usize,
    pub delta_norm: f64,
}

impl FoldRecord {
    /// Fold bookkeeping for a delta with the given support on top of the
    /// positions already changed.
    pub fn from_support(layer: u32, support: &Mask, changed: &Mask, delta_norm: f64) -> Self {
        let novel = support
            .bits()
            .iter()
            .zip(changed.bits())
            .filter(|(&s, &c)| s && !c)
            .count();
        Self {
            layer,
            support: support.count_ones(),
            novel,
            mask_ones: support.count_ones(),
            cells: support.len(),
            delta_norm,
        }
    }
}

/// One adapted projection weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptedLinear {
    layer: u32,
    w_init: Tensor,
    w_prev: Tensor,
    a: Param,
    b: Param,
    mask: MaskParam,
    cfg: AdapterConfig,
    changed: Mask,
    folds: u32,
}

impl AdaptedLinear {
    pub fn new(layer: u32, w_init: Tensor, cfg: AdapterConfig) -> Result<Self> {
        let (d1, d2) = w_init.dims2("adapted_linear")?;
        if cfg.rank == 0 || cfg.rank > d1.min(d2) {
            return Err(AdapterError::Config(format!(
                "rank {} must be in 1..={} for a {d1}x{d2} weight",
                cfg.rank,
                d1.min(d2)
            )));
        }
        if let MaskGate::Gumbel(g) = &cfg.gate {
            g.validate()?;
        }
        let mut layer = Self {
            layer,
            w_prev: w_init.clone(),
            w_init,
            a: Param::new(Tensor::zeros(&[d1, cfg.rank])),
            b: Param::new(Tensor::zeros(&[cfg.rank, d2])),
            mask: MaskParam::Off,
            cfg,
            changed: Mask::zeros(d1, d2),
            folds: 0,
        };
        layer.reset_adapter();
        Ok(layer)
    }

    pub fn layer_id(&self) -> u32 {
        self.layer
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w_init.rows(), self.w_init.cols())
    }

    pub fn rank(&self) -> usize {
        self.cfg.rank
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn w_init(&self) -> &Tensor {
        &self.w_init
    }

    pub fn w_prev(&self) -> &Tensor {
        &self.w_prev
    }

    pub fn changed_mask(&self) -> &Mask {
        &self.changed
    }

    pub fn folds(&self) -> u32 {
        self.folds
    }

    pub fn a(&self) -> &Tensor {
        self.a.value()
    }

    pub fn b(&self) -> &Tensor {
        self.b.value()
    }

    /// Replaces the live low-rank factors.
    pub fn set_factors(&mut self, a: Tensor, b: Tensor) -> Result<()> {
        let (d1, d2) = self.dims();
        if a.shape() != [d1, self.cfg.rank] || b.shape() != [self.cfg.rank, d2] {
            return Err(AdapterError::Config(format!(
                "factors {:?}·{:?} do not match a {d1}x{d2} rank-{} layer",
                a.shape(),
                b.shape(),
                self.cfg.rank
            )));
        }
        self.a.set(a);
        self.b.set(b);
        Ok(())
    }

    /// Replaces the mask parameters (an MLP, or a direct logit tensor).
    pub fn set_mask_mlp(&mut self, mlp: MaskMlp) -> Result<()> {
        let (d1, d2) = self.dims();
        if (mlp.d1, mlp.d2) != (d1, d2) {
            return Err(AdapterError::Config("mask MLP dims differ from layer".into()));
        }
        self.mask = MaskParam::Mlp(mlp);
        Ok(())
    }

    pub fn set_mask_logits(&mut self, logits: Tensor) -> Result<()> {
        let (d1, d2) = self.dims();
        if logits.shape() != [d1, d2, 2] {
            return Err(AdapterError::Config(format!(
                "direct logits must be {d1}x{d2}x2, got {:?}",
                logits.shape()
            )));
        }
        self.mask = MaskParam::Direct(Param::new(logits));
        Ok(())
    }

    /// Fresh adapter for the next task: `A ~ N(0, 0.02²)`, `B = 0`, and a
    /// mask producing zero logits. The residual starts at exactly zero.
    pub fn reset_adapter(&mut self) {
        let (d1, d2) = self.dims();
        let mut rng = rng::keyed(
            self.cfg.init_seed,
            &[domain::ADAPTER_INIT, u64::from(self.layer), u64::from(self.folds)],
        );
        let r = self.cfg.rank;
        self.a = Param::new(Tensor::randn(&[d1, r], INIT_STD, &mut rng));
        self.b = Param::new(Tensor::zeros(&[r, d2]));
        self.mask = match self.cfg.mask {
            MaskKind::Mlp => MaskParam::Mlp(MaskMlp::init(r, d1, d2, &mut rng)),
            MaskKind::Direct => MaskParam::Direct(Param::new(Tensor::zeros(&[d1, d2, 2]))),
            MaskKind::Off => MaskParam::Off,
        };
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.a, &mut self.b];
        match &mut self.mask {
            MaskParam::Mlp(m) => out.extend(m.params_mut()),
            MaskParam::Direct(p) => out.push(p),
            MaskParam::Off => {}
        }
        out
    }

    /// Live trainable parameter count (adapter plus mask parameters).
    pub fn trainable_count(&self) -> usize {
        let mask = match &self.mask {
            MaskParam::Mlp(m) => m.numel(),
            MaskParam::Direct(p) => p.numel(),
            MaskParam::Off => 0,
        };
        self.a.numel() + self.b.numel() + mask
    }

    pub fn mask_logits(&self, tape: &Tape) -> Result<Option<Var>> {
        match &self.mask {
            MaskParam::Mlp(m) => Ok(Some(m.logits(tape)?)),
            MaskParam::Direct(p) => Ok(Some(p.var(tape))),
            MaskParam::Off => Ok(None),
        }
    }

    pub fn mask_logits_value(&self) -> Result<Option<Tensor>> {
        match &self.mask {
            MaskParam::Mlp(m) => Ok(Some(m.logits_value()?)),
            MaskParam::Direct(p) => Ok(Some(p.value().clone())),
            MaskParam::Off => Ok(None),
        }
    }

    /// `W_prev + (A·B) ⊙ mask` on the tape.
    pub fn effective_weight(&self, tape: &Tape, mask: Var) -> Result<Var> {
        let (d1, d2) = self.dims();
        let ms = tape.shape(mask);
        if ms != [d1, d2] {
            return Err(TensorError::Shape {
                op: "effective_weight",
                lhs: vec![d1, d2],
                rhs: ms,
            }
            .into());
        }
        let ab = tape.matmul(self.a.var(tape), self.b.var(tape))?;
        let residual = tape.mul(ab, mask)?;
        Ok(tape.add(tape.constant(self.w_prev.clone()), residual)?)
    }

    /// `W_prev + (A·B) ⊙ mask` evaluated directly.
    pub fn effective_weight_value(&self, mask: &Tensor) -> Result<Tensor> {
        let ab = self.a.value().matmul(self.b.value())?;
        Ok(self.w_prev.add(&ab.mul(mask)?)?)
    }

    /// Records the masked residual and effective weight for one step.
    pub fn terms(&self, tape: &Tape, noise: &GumbelNoise) -> Result<LayerTerms> {
        let ab = tape.matmul(self.a.var(tape), self.b.var(tape))?;
        let (mask, soft) = match (self.mask_logits(tape)?, &self.cfg.gate) {
            (None, _) => (None, None),
            (Some(logits), MaskGate::Gumbel(g)) => {
                let gm = gumbel_softmax_mask(tape, logits, g, noise)?;
                (Some(gm.mask), Some(gm.soft))
            }
            (Some(logits), MaskGate::Sigmoid) => {
                let s = self.sigmoid_mask(tape, logits)?;
                (Some(s), Some(s))
            }
        };
        let residual = match mask {
            Some(m) => tape.mul(ab, m)?,
            None => ab,
        };
        let weight = tape.add(tape.constant(self.w_prev.clone()), residual)?;
        Ok(LayerTerms {
            weight,
            residual,
            soft_mask: soft,
        })
    }

    fn sigmoid_mask(&self, tape: &Tape, logits: Var) -> Result<Var> {
        let (d1, d2) = self.dims();
        let pairs = tape.reshape(logits, &[d1 * d2, 2])?;
        let pass = tape.select_cols(pairs, &[1])?;
        let s = tape.sigmoid(pass)?;
        Ok(tape.reshape(s, &[d1, d2])?)
    }

    /// The mask applied at fold time.
    ///
    /// Gumbel gates use the noise-free argmax. A sigmoid gate never produces
    /// exact zeros, so its soft values are folded as trained.
    pub fn fold_mask(&self) -> Result<Tensor> {
        let (d1, d2) = self.dims();
        let Some(logits) = self.mask_logits_value()? else {
            return Ok(Tensor::ones(&[d1, d2]));
        };
        match self.cfg.gate {
            MaskGate::Gumbel(_) => Ok(deterministic_mask(&logits)?.to_tensor()),
            MaskGate::Sigmoid => Ok(Tensor::new(
                vec![d1, d2],
                logits
                    .data()
                    .chunks_exact(2)
                    .map(|p| crate::tensor::sigmoid_value(p[1]))
                    .collect(),
            )?),
        }
    }

    /// `ΔW` that [`fold`](Self::fold) would add.
    pub fn pending_delta(&self) -> Result<Tensor> {
        let ab = self.a.value().matmul(self.b.value())?;
        Ok(ab.mul(&self.fold_mask()?)?)
    }

    /// `|W_prev − W_init|`, the accumulated prior change.
    pub fn prior_change_abs(&self) -> Tensor {
        self.w_prev
            .sub(&self.w_init)
            .expect("w_prev and w_init share a shape")
            .map(f64::abs)
    }

    /// Folds the current residual into `W_prev` and starts a fresh adapter.
    pub fn fold(&mut self) -> Result<FoldRecord> {
        let mask_ones = {
            let m = self.fold_mask()?;
            m.data().iter().filter(|&&v| v != 0.0).count()
        };
        let delta = self.pending_delta()?;
        let support = Mask::nonzero(&delta)?;
        let mut record = FoldRecord::from_support(self.layer, &support, &self.changed, delta.norm());
        record.mask_ones = mask_ones;
        self.w_prev.add_assign(&delta)?;
        self.changed.union_with(&support);
        self.folds += 1;
        self.reset_adapter();
        Ok(record)
    }

    /// Rebuilds a layer from checkpointed state; the adapter is
    /// re-initialised for the next task.
    pub fn restore(
        layer: u32,
        w_init: Tensor,
        w_prev: Tensor,
        changed: Mask,
        folds: u32,
        cfg: AdapterConfig,
    ) -> Result<Self> {
        let mut l = Self::new(layer, w_init, cfg)?;
        l.restore_state(w_prev, changed, folds)?;
        Ok(l)
    }

    /// Replaces the folded history in place and starts the adapter that
    /// follows `folds` folds.
    pub fn restore_state(&mut self, w_prev: Tensor, changed: Mask, folds: u32) -> Result<()> {
        if w_prev.shape() != self.w_init.shape() || changed.shape() != self.dims() {
            return Err(AdapterError::Config("checkpoint shapes differ from W_init".into()));
        }
        self.w_prev = w_prev;
        self.changed = changed;
        self.folds = folds;
        self.reset_adapter();
        Ok(())
    }
}
