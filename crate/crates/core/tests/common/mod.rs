//! Small adapted layer with a token MLP, shared by the gradient and fold
//! checks.
#![allow(dead_code)]

use stamina_core::adapters::{
    sample_gumbel, AdaptedLinear, AdapterConfig, GumbelConfig, GumbelNoise, Mask, MaskGate, MaskKind,
    MaskMlp, TokenMlp,
};
use stamina_core::losses::{forgetting_loss, sparsity_loss, task_loss, total_loss, LossTerms, LossWeights, Target};
use stamina_core::optim::{Optimizer, OptimizerKind};
use stamina_core::param::Param;
use stamina_core::rng;
use stamina_core::tensor::gradcheck::{numerical_gradient, relative_error, DEFAULT_STEP};
use stamina_core::tensor::{Tape, Tensor, Var};

pub const D: usize = 8;
pub const RANK: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Task,
    Forget,
    Sparse,
    Total,
}

pub const TERMS: [Term; 4] = [Term::Task, Term::Forget, Term::Sparse, Term::Total];

#[derive(Debug, Clone)]
pub struct Fixture {
    pub layer: AdaptedLinear,
    pub token: TokenMlp,
    pub noise: Tensor,
    pub target: Tensor,
    pub weights: LossWeights,
}

/// A layer with one prior fold on about half its positions, random live
/// factors and mask MLP, and a random token MLP.
pub fn fixture(seed: u64, hard: bool) -> Fixture {
    let mut r = rng::keyed(seed, &[0xf1, 0x7e]);
    let w_init = Tensor::randn(&[D, D], 1.0, &mut r);
    let bump = Tensor::randn(&[D, D], 0.3, &mut r);
    let keep = Tensor::uniform(&[D, D], 0.0, 1.0, &mut r).map(|u| if u < 0.5 { 1.0 } else { 0.0 });
    let delta = bump.mul(&keep).unwrap();
    let w_prev = w_init.add(&delta).unwrap();
    let cfg = AdapterConfig {
        rank: RANK,
        mask: MaskKind::Mlp,
        gate: MaskGate::Gumbel(GumbelConfig {
            tau: 0.5,
            hard,
            seed,
        }),
        init_seed: seed,
    };
    let mut layer = AdaptedLinear::new(0, w_init, cfg).unwrap();
    layer
        .restore_state(w_prev, Mask::nonzero(&delta).unwrap(), 1)
        .unwrap();
    layer
        .set_factors(Tensor::randn(&[D, RANK], 0.5, &mut r), Tensor::randn(&[RANK, D], 0.5, &mut r))
        .unwrap();
    layer
        .set_mask_mlp(
            MaskMlp::from_weights(
                Tensor::randn(&[RANK, RANK], 1.0, &mut r),
                Tensor::randn(&[RANK, D * D * 2], 0.7, &mut r),
                D,
                D,
            )
            .unwrap(),
        )
        .unwrap();
    let token = TokenMlp::from_weights(
        Tensor::randn(&[D, D], 1.0 / (D as f64).sqrt(), &mut r),
        Tensor::randn(&[D, D], 0.5, &mut r),
    )
    .unwrap();
    Fixture {
        layer,
        token,
        noise: sample_gumbel(&[D, D, 2], &mut r),
        target: Tensor::randn(&[1, D], 1.0, &mut r),
        weights: LossWeights::STAMINA,
    }
}

impl Fixture {
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.layer.params_mut();
        p.extend(self.token.params_mut());
        p
    }

    /// The requested term on `tape`, with whatever parameters are bound.
    pub fn term(&self, tape: &Tape, term: Term) -> Var {
        let t = self.layer.terms(tape, &GumbelNoise::Fixed(self.noise.clone())).unwrap();
        let tok = self.token.embed(tape).unwrap();
        let out = tape.matmul(tok, t.weight).unwrap();
        let task = task_loss(tape, out, Target::Values(&self.target)).unwrap();
        let forget = forgetting_loss(tape, &self.layer.prior_change_abs(), t.residual).unwrap();
        let sparse = sparsity_loss(tape, t.soft_mask.unwrap()).unwrap();
        match term {
            Term::Task => task,
            Term::Forget => forget,
            Term::Sparse => sparse,
            Term::Total => {
                let terms = LossTerms {
                    task,
                    forget: Some(forget),
                    sparse: Some(sparse),
                };
                total_loss(tape, &self.weights, terms).unwrap().0
            }
        }
    }

    pub fn value(&self, term: Term) -> f64 {
        let tape = Tape::new();
        tape.scalar(self.term(&tape, term))
    }

    /// Reverse-mode gradients, one per parameter.
    pub fn analytic(&mut self, term: Term) -> Vec<Tensor> {
        let tape = Tape::new();
        for p in self.params_mut() {
            p.bind(&tape);
        }
        let root = self.term(&tape, term);
        let g = tape.backward(root).unwrap();
        let out = self.params_mut().iter().map(|p| p.grad(&g)).collect();
        for p in self.params_mut() {
            p.unbind();
        }
        out
    }

    /// Central differences, one per parameter.
    pub fn numeric(&self, term: Term) -> Vec<Tensor> {
        let n = self.clone().params_mut().len();
        (0..n)
            .map(|k| {
                let x = self.clone().params_mut()[k].value().clone();
                numerical_gradient(
                    |probe| {
                        let mut f = self.clone();
                        f.params_mut()[k].set(probe.clone());
                        f.value(term)
                    },
                    &x,
                    DEFAULT_STEP,
                )
            })
            .collect()
    }

    /// Worst per-parameter relative error between the two gradients.
    pub fn max_relative_error(&mut self, term: Term) -> f64 {
        let a = self.analytic(term);
        let n = self.numeric(term);
        a.iter()
            .zip(&n)
            .map(|(a, n)| relative_error(a, n))
            .fold(0.0, f64::max)
    }

    /// A few Adam steps on the full objective with straight-through masks.
    pub fn train(&mut self, steps: usize) {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2);
        for s in 0..steps {
            let mut r = rng::keyed(s as u64, &[0x7a]);
            self.noise = sample_gumbel(&[D, D, 2], &mut r);
            let g = self.analytic(Term::Total);
            opt.step(&mut self.params_mut(), &g);
        }
    }
}
