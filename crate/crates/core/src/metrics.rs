//! Kernel two-sample metrics over embedded samples, interference and
//! weight-distance series, and a Kendall trend test.
//!
//! All MMD-based metrics use the cubic polynomial kernel
//! `k(x, y) = (xᵀy/d + 1)³` and are reported ×10³.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::{self, domain};
use crate::tensor::Tensor;
use crate::trainer::ContinualLog;
use crate::{Error, Result};

/// Scale applied to every reported MMD value.
pub const MMD_SCALE: f64 = 1e3;

/// Fixed map from sample space into the embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Embedder {
    Identity { dim: usize },
    /// `x ↦ x·P` with `P` having orthonormal columns.
    Projection { seed: u64, matrix: Tensor },
}

impl Embedder {
    pub fn identity(dim: usize) -> Self {
        Embedder::Identity { dim }
    }

    /// Gram-Schmidt orthonormalization of a seeded Gaussian `input×output`
    /// matrix.
    pub fn projection(input: usize, output: usize, seed: u64) -> Result<Self> {
        if output == 0 || output > input {
            return Err(Error::Config(format!(
                "projection from {input} to {output} dimensions needs 0 < output <= input"
            )));
        }
        let mut r = rng::keyed(seed, &[domain::EMBEDDER]);
        let g = Tensor::randn(&[output, input], 1.0, &mut r);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(output);
        for i in 0..output {
            let mut v = g.row(i).to_vec();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
        let mut data = vec![0.0; input * output];
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                data[i * output + j] = v;
            }
        }
        Ok(Embedder::Projection {
            seed,
            matrix: Tensor::new(vec![input, output], data)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Embedder::Identity { dim } => *dim,
            Embedder::Projection { matrix, .. } => matrix.cols(),
        }
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Embedder::Identity { dim } => {
                if x.cols() != *dim {
                    return Err(Error::Config(format!(
                        "identity embedder expects {dim} columns, got {}",
                        x.cols()
                    )));
                }
                Ok(x.clone())
            }
            Embedder::Projection { matrix, .. } => {
                if x.rows() == 0 {
                    return Ok(Tensor::zeros(&[0, matrix.cols()]));
                }
                Ok(x.matmul(matrix)?)
            }
        }
    }
}

fn kernel(x: &[f64], y: &[f64], d: f64) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD² between two embedded sets.
///
/// Within-set sums exclude the diagonal. When both sets have the same size
/// the cross term also excludes `i = j`, which makes the estimate of a set
/// against itself exactly zero; otherwise the full cross sum is used.
pub fn mmd2(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (m, n) = (x.rows(), y.rows());
    if x.shape().len() != 2 || y.shape().len() != 2 || m < 2 || n < 2 {
        return Err(Error::Metric(format!(
            "MMD needs two sets of at least 2 samples, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.cols() != y.cols() {
        return Err(Error::Metric(format!(
            "embedding widths differ: {} vs {}",
            x.cols(),
            y.cols()
        )));
    }
    let d = x.cols() as f64;
    let within = |s: &Tensor| {
        let k = s.rows();
        let mut acc = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    acc += kernel(s.row(i), s.row(j), d);
                }
            }
        }
        acc / (k * (k - 1)) as f64
    };
    let (kxx, kyy) = (within(x), within(y));
    let mut cross = 0.0;
    let kxy = if m == n {
        for i in 0..m {
            for j in 0..n {
                if i != j {
                    cross += kernel(x.row(i), y.row(j), d);
                }
            }
        }
        cross / (m * (m - 1)) as f64
    } else {
        for i in 0..m {
            for j in 0..n {
                cross += kernel(x.row(i), y.row(j), d);
            }
        }
        cross / (m * n) as f64
    };
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Outcome of a label-permutation test on MMD².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    pub p_value: f64,
    pub null_mean: f64,
    pub null_std: f64,
}

/// One-sided permutation test of `mmd2(x, y) > 0`.
pub fn permutation_test(x: &Tensor, y: &Tensor, permutations: usize, seed: u64) -> Result<PermutationTest> {
    let statistic = mmd2(x, y)?;
    let pool = Tensor::concat_rows(&[x, y])?;
    let m = x.rows();
    let mut idx: Vec<usize> = (0..pool.rows()).collect();
    let mut r = rng::keyed(seed, &[domain::PERMUTATION]);
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        idx.shuffle(&mut r);
        let take = |ids: &[usize]| {
            let rows: Vec<f64> = ids.iter().flat_map(|&i| pool.row(i).to_vec()).collect();
            Tensor::new(vec![ids.len(), pool.cols()], rows)
        };
        null.push(mmd2(&take(&idx[..m])?, &take(&idx[m..])?)?);
    }
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    let k = null.len().max(1) as f64;
    let null_mean = null.iter().sum::<f64>() / k;
    let null_std = (null.iter().map(|v| (v - null_mean).powi(2)).sum::<f64>() / k).sqrt();
    Ok(PermutationTest {
        statistic,
        p_value: (1 + exceed) as f64 / (permutations + 1) as f64,
        null_mean,
        null_std,
    })
}

fn snapshot(log: &ContinualLog, i: u32, j: u32) -> Result<&Tensor> {
    log.snapshot(i, j)
        .ok_or_else(|| Error::Metric(format!("snapshot X_({i},{j}) is missing")))
}

fn dataset(data: &[Tensor], j: u32) -> Result<&Tensor> {
    data.get(j as usize - 1)
        .ok_or_else(|| Error::Metric(format!("dataset embeddings for task {j} are missing")))
}

/// Final quality: mean over tasks of `MMD(X_D,j, X_N,j)`, ×10³.
pub fn a_mmd(log: &ContinualLog, data: &[Tensor]) -> Result<f64> {
    let n = log.completed;
    if n == 0 {
        return Err(Error::Metric("no task was completed".into()));
    }
    let mut acc = 0.0;
    for j in 1..=n {
        acc += mmd2(dataset(data, j)?, snapshot(log, n, j)?)?;
    }
    Ok(MMD_SCALE * acc / f64::from(n))
}

/// Forgetting: mean over `j < N` of `MMD(X_j,j, X_N,j)`, ×10³.
pub fn f_mmd(log: &ContinualLog) -> Result<f64> {
    let n = log.completed;
    if n < 2 {
        return Err(Error::Metric(format!("forgetting needs at least 2 tasks, got {n}")));
    }
    let mut acc = 0.0;
    for j in 1..n {
        acc += mmd2(snapshot(log, j, j)?, snapshot(log, n, j)?)?;
    }
    Ok(MMD_SCALE * acc / f64::from(n - 1))
}

/// Per-task plasticity `MMD(X_D,j, X_j,j)` ×10³, right after learning `j`.
pub fn plasticity_series(log: &ContinualLog, data: &[Tensor]) -> Result<Vec<f64>> {
    (1..=log.completed)
        .map(|j| Ok(MMD_SCALE * mmd2(dataset(data, j)?, snapshot(log, j, j)?)?))
        .collect()
}

/// Plasticity: mean of [`plasticity_series`].
pub fn p_mmd(log: &ContinualLog, data: &[Tensor]) -> Result<f64> {
    let s = plasticity_series(log, data)?;
    if s.is_empty() {
        return Err(Error::Metric("no task was completed".into()));
    }
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Per task, the percentage of the folded change landing on positions no
/// earlier task modified, averaged over layers. Empty changes count as 100.
pub fn interference_series(log: &ContinualLog) -> Vec<f64> {
    log.folds
        .iter()
        .map(|layers| {
            if layers.is_empty() {
                return 100.0;
            }
            let sum: f64 = layers
                .iter()
                .map(|f| {
                    if f.support == 0 {
                        100.0
                    } else {
                        100.0 * f.novel as f64 / f.support as f64
                    }
                })
                .sum();
            sum / layers.len() as f64
        })
        .collect()
}

/// `‖W_t − W_init‖_F` averaged over layers, for `t = 0..=N` (0 first).
pub fn weight_distance_series(log: &ContinualLog) -> Vec<f64> {
    std::iter::once(0.0)
        .chain(log.distances.iter().map(|d| {
            if d.is_empty() {
                0.0
            } else {
                d.iter().sum::<f64>() / d.len() as f64
            }
        }))
        .collect()
}

/// Per-task increments of [`weight_distance_series`].
pub fn weight_increments(log: &ContinualLog) -> Vec<f64> {
    weight_distance_series(log).windows(2).map(|w| w[1] - w[0]).collect()
}

/// Mean accuracy over all tasks after the last one (classifier runs).
pub fn final_accuracy(log: &ContinualLog) -> Result<f64> {
    let last = log
        .accuracy
        .last()
        .filter(|a| !a.is_empty())
        .ok_or_else(|| Error::Metric("no accuracy snapshots".into()))?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Accuracy on each task right after learning it (classifier runs).
pub fn accuracy_plasticity_series(log: &ContinualLog) -> Result<Vec<f64>> {
    log.accuracy
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.get(i)
                .copied()
                .ok_or_else(|| Error::Metric(format!("accuracy of task {} after itself is missing", i + 1)))
        })
        .collect()
}

/// Mean drop in accuracy from right after task `j` to the end, over `j < N`.
pub fn accuracy_forgetting(log: &ContinualLog) -> Result<f64> {
    let n = log.accuracy.len();
    if n < 2 {
        return Err(Error::Metric(format!("forgetting needs at least 2 tasks, got {n}")));
    }
    let just = accuracy_plasticity_series(log)?;
    let last = &log.accuracy[n - 1];
    if last.len() < n {
        return Err(Error::Metric("final accuracy row is incomplete".into()));
    }
    Ok((0..n - 1).map(|j| just[j] - last[j]).sum::<f64>() / (n - 1) as f64)
}

/// Kendall rank correlation with tie correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KendallTest {
    pub tau_b: f64,
    pub z: f64,
    /// Two-sided p-value from the normal approximation.
    pub p_value: f64,
}

fn tie_sums(v: &[f64]) -> (f64, f64, f64) {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j + 1 < s.len() && s[j + 1] == s[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        a += t * (t - 1.0) / 2.0;
        b += t * (t - 1.0) * (2.0 * t + 5.0);
        c += t * (t - 1.0) * (t - 2.0);
        i = j + 1;
    }
    (a, b, c)
}

/// Kendall's τ-b between `x` and `y` with the tie-corrected variance of `S`.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<KendallTest> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return Err(Error::Metric(format!(
            "Kendall test needs two equal-length series of at least 3 points, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let p = (x[i] - x[j]).signum() * (y[i] - y[j]).signum();
            if x[i] != x[j] && y[i] != y[j] {
                s += p;
            }
        }
    }
    let nf = n as f64;
    let n0 = nf * (nf - 1.0) / 2.0;
    let (tx, vx, wx) = tie_sums(x);
    let (ty, vy, wy) = tie_sums(y);
    let denom = ((n0 - tx) * (n0 - ty)).sqrt();
    if denom == 0.0 {
        return Err(Error::Metric("Kendall test on a constant series".into()));
    }
    let var = (nf * (nf - 1.0) * (2.0 * nf + 5.0) - vx - vy) / 18.0
        + (2.0 * tx) * (2.0 * ty) / (2.0 * nf * (nf - 1.0))
        + wx * wy / (9.0 * nf * (nf - 1.0) * (nf - 2.0));
    let z = s / var.sqrt();
    Ok(KendallTest {
        tau_b: s / denom,
        z,
        p_value: libm::erfc(z.abs() / std::f64::consts::SQRT_2),
    })
}
