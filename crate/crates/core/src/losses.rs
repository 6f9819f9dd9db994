//! Objective terms: task loss, forgetting penalty, mask sparsity, and their
//! weighted sum `task + λ_f·forget + λ_s·sparse`.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::STAMINA
    }
}

impl LossWeights {
    pub const STAMINA: Self = Self {
        lambda_f: 1e3,
        lambda_s: 1e-3,
    };
    pub const CLORA: Self = Self {
        lambda_f: 1e8,
        lambda_s: 0.0,
    };
    pub const NONE: Self = Self {
        lambda_f: 0.0,
        lambda_s: 0.0,
    };

    pub fn is_valid(&self) -> bool {
        [self.lambda_f, self.lambda_s]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub forget: f64,
    pub sparse: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(task: f64, forget: f64, sparse: f64, w: &LossWeights) -> Self {
        Self {
            task,
            forget,
            sparse,
            total: task + w.lambda_f * forget + w.lambda_s * sparse,
        }
    }
}

/// `‖ |W_prev − W_init| ⊙ residual ‖²`.
///
/// `prior_abs` is the accumulated prior change `|W_prev − W_init|`; by
/// telescoping it equals the absolute sum of every folded residual.
pub fn forgetting_loss(tape: &Tape, prior_abs: &Tensor, residual: Var) -> Result<Var> {
    let rs = tape.shape(residual);
    if rs != prior_abs.shape() {
        return Err(TensorError::Shape {
            op: "forgetting_loss",
            lhs: prior_abs.shape().to_vec(),
            rhs: rs,
        });
    }
    let weighted = tape.mul(tape.constant(prior_abs.clone()), residual)?;
    tape.l2_norm_sq(weighted)
}

/// L1 norm of the soft mask values.
pub fn sparsity_loss(tape: &Tape, soft_mask: Var) -> Result<Var> {
    tape.l1_sum(soft_mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Denoiser,
    Classifier,
}

/// Targets for [`task_loss`].
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    /// Regression target. The loss is the squared error summed over a row's
    /// columns and averaged over rows.
    Values(&'a Tensor),
    /// Class indices compared with softmax cross-entropy.
    Classes(&'a [usize]),
}

pub fn task_loss(tape: &Tape, outputs: Var, target: Target<'_>) -> Result<Var> {
    match target {
        Target::Values(t) => {
            let os = tape.shape(outputs);
            if os != t.shape() {
                return Err(TensorError::Shape {
                    op: "mse",
                    lhs: os,
                    rhs: t.shape().to_vec(),
                });
            }
            let diff = tape.sub(outputs, tape.constant(t.clone()))?;
            let sq = tape.mul(diff, diff)?;
            let m = tape.mean(sq)?;
            tape.scale(m, os[1] as f64)
        }
        Target::Classes(c) => tape.cross_entropy(outputs, c),
    }
}

/// Scalar nodes for the three terms; `None` marks an inactive term.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub task: Var,
    pub forget: Option<Var>,
    pub sparse: Option<Var>,
}

/// Weighted objective on the tape plus its evaluated breakdown.
pub fn total_loss(tape: &Tape, w: &LossWeights, terms: LossTerms) -> Result<(Var, LossBreakdown)> {
    let mut total = terms.task;
    let mut forget = 0.0;
    let mut sparse = 0.0;
    if let Some(f) = terms.forget {
        forget = tape.scalar(f);
        if w.lambda_f != 0.0 {
            total = tape.add(total, tape.scale(f, w.lambda_f)?)?;
        }
    }
    if let Some(s) = terms.sparse {
        sparse = tape.scalar(s);
        if w.lambda_s != 0.0 {
            total = tape.add(total, tape.scale(s, w.lambda_s)?)?;
        }
    }
    let breakdown = LossBreakdown::combine(tape.scalar(terms.task), forget, sparse, w);
    Ok((total, breakdown))
}

/// Sums scalar nodes, `None` when there are none.
pub fn sum_terms(tape: &Tape, terms: &[Var]) -> Result<Option<Var>> {
    let mut it = terms.iter().copied();
    let Some(first) = it.next() else {
        return Ok(None);
    };
    let mut acc = first;
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(acc))
}
