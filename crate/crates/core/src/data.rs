//! Synthetic concepts and the rehearsal-free data interface.
//!
//! Training code never receives the full concept set. It asks a
//! [`TaskSource`] for one task's [`TaskData`], which owns that task's training
//! split and nothing else.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::losses::Mode;
use crate::rng::{self, domain};
use crate::tensor::Tensor;
use crate::trainer::TaskSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// One Gaussian cluster per task (denoiser mode).
    GaussianCluster,
    /// Several labelled sequence prototypes per task (classifier mode).
    LabeledClusters,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptGenerator {
    pub kind: GeneratorKind,
    pub seed: u64,
    /// Width of one vector (data dimension, or token width for sequences).
    pub dim: usize,
    /// Tokens per sequence; 1 for plain vectors.
    pub seq_len: usize,
    pub center_scale: f64,
    pub noise_scale: f64,
    /// Log-normal spread of per-dimension noise scales.
    pub anisotropy: f64,
    pub classes_per_task: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl ConceptGenerator {
    pub fn denoiser(seed: u64) -> Self {
        Self {
            kind: GeneratorKind::GaussianCluster,
            seed,
            dim: 16,
            seq_len: 1,
            center_scale: 1.0,
            noise_scale: 0.3,
            anisotropy: 0.5,
            classes_per_task: 1,
            train_samples: 256,
            eval_samples: 128,
        }
    }

    pub fn classifier(seed: u64) -> Self {
        Self {
            kind: GeneratorKind::LabeledClusters,
            seed,
            dim: 16,
            seq_len: 4,
            center_scale: 1.0,
            noise_scale: 0.5,
            anisotropy: 0.0,
            classes_per_task: 2,
            train_samples: 128,
            eval_samples: 64,
        }
    }

    pub fn width(&self) -> usize {
        self.dim * self.seq_len
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!(
                "noise scale must be positive, got {}",
                self.noise_scale
            )));
        }
        if self.dim == 0 || self.seq_len == 0 || self.classes_per_task == 0 {
            return Err(Error::Config("concept dimensions must be positive".into()));
        }
        if self.train_samples == 0 || self.eval_samples < 2 {
            return Err(Error::Config(
                "need at least one training and two evaluation samples per concept".into(),
            ));
        }
        Ok(())
    }

    /// Draws concept parameters from the stream keyed by `(domain, index)`.
    /// Pretraining concepts use a different domain tag than task concepts.
    pub fn concept(&self, domain_tag: u64, index: u64, first_class: usize) -> ConceptParams {
        let concept_seed = rng::mix(self.seed, &[domain_tag, index]);
        let mut r = rng::keyed(concept_seed, &[]);
        let w = self.width();
        let centers = (0..self.classes_per_task)
            .map(|_| {
                (0..w)
                    .map(|_| self.center_scale * r.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let scale = (0..w)
            .map(|_| self.noise_scale * (self.anisotropy * r.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        ConceptParams {
            seed: concept_seed,
            centers,
            scale,
            classes: (first_class..first_class + self.classes_per_task).collect(),
        }
    }
}

/// Parameters of one synthetic concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptParams {
    pub seed: u64,
    /// One centre per class.
    pub centers: Vec<Vec<f64>>,
    /// Per-dimension noise standard deviation.
    pub scale: Vec<f64>,
    /// Global class ids, aligned with `centers`.
    pub classes: Vec<usize>,
}

impl ConceptParams {
    /// `n` samples cycling through the classes, drawn from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Tensor, Vec<usize>) {
        let w = self.scale.len();
        let mut data = Vec::with_capacity(n * w);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % self.centers.len();
            for (m, s) in self.centers[c].iter().zip(&self.scale) {
                data.push(m + s * rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(self.classes[c]);
        }
        (Tensor::new(vec![n, w], data).expect("sample length matches"), labels)
    }
}

/// Train and held-out splits for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptData {
    pub task: u32,
    pub train: Tensor,
    pub train_labels: Vec<usize>,
    pub eval: Tensor,
    pub eval_labels: Vec<usize>,
}

impl ConceptData {
    pub fn from_params(task: u32, p: &ConceptParams, n_train: usize, n_eval: usize) -> Self {
        let (train, train_labels) = p.sample(n_train, &mut rng::keyed(p.seed, &[0]));
        let (eval, eval_labels) = p.sample(n_eval, &mut rng::keyed(p.seed, &[1]));
        Self {
            task,
            train,
            train_labels,
            eval,
            eval_labels,
        }
    }
}

/// `N` task specs plus their data splits, classes numbered consecutively.
pub fn generate_concepts(
    gen: &ConceptGenerator,
    n: usize,
    steps: usize,
    batch_size: usize,
) -> Result<(Vec<TaskSpec>, Vec<ConceptData>)> {
    gen.validate()?;
    if n == 0 {
        return Err(Error::Config("need at least one task".into()));
    }
    let mode = match gen.kind {
        GeneratorKind::GaussianCluster => Mode::Denoiser,
        GeneratorKind::LabeledClusters => Mode::Classifier,
    };
    let mut specs = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n);
    for t in 1..=n as u32 {
        let p = gen.concept(domain::CONCEPT, u64::from(t), (t as usize - 1) * gen.classes_per_task);
        data.push(ConceptData::from_params(t, &p, gen.train_samples, gen.eval_samples));
        specs.push(TaskSpec {
            task: t,
            concept: p,
            steps,
            batch_size,
            mode,
        });
    }
    Ok((specs, data))
}

/// One sampled training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBatch {
    pub task: u32,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// The training split of a single task.
#[derive(Debug, Clone)]
pub struct TaskData {
    task: u32,
    x: Tensor,
    labels: Vec<usize>,
}

impl TaskData {
    pub fn new(task: u32, x: Tensor, labels: Vec<usize>) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != labels.len() || labels.is_empty() {
            return Err(Error::Config(format!(
                "task {task} data of shape {:?} with {} labels",
                x.shape(),
                labels.len()
            )));
        }
        Ok(Self { task, x, labels })
    }

    pub fn task(&self) -> u32 {
        self.task
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `n` rows drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> ConceptBatch {
        let w = self.x.cols();
        let mut data = Vec::with_capacity(n * w);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.random_range(0..self.len());
            data.extend_from_slice(self.x.row(i));
            labels.push(self.labels[i]);
        }
        ConceptBatch {
            task: self.task,
            x: Tensor::new(vec![n, w], data).expect("batch length matches"),
            labels,
        }
    }
}

/// Hands out one task's training data at a time.
pub trait TaskSource {
    fn open(&mut self, task: u32) -> Result<TaskData>;
}

impl TaskSource for [ConceptData] {
    fn open(&mut self, task: u32) -> Result<TaskData> {
        let c = self
            .iter()
            .find(|c| c.task == task)
            .ok_or(Error::UnknownConcept(task))?;
        TaskData::new(task, c.train.clone(), c.train_labels.clone())
    }
}

impl TaskSource for Vec<ConceptData> {
    fn open(&mut self, task: u32) -> Result<TaskData> {
        self.as_mut_slice().open(task)
    }
}

/// Wraps a source and records every task it was asked for.
#[derive(Debug)]
pub struct AccessLog<S> {
    inner: S,
    opened: Vec<u32>,
}

impl<S> AccessLog<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            opened: Vec::new(),
        }
    }

    pub fn opened(&self) -> &[u32] {
        &self.opened
    }
}

impl<S: TaskSource> TaskSource for AccessLog<S> {
    fn open(&mut self, task: u32) -> Result<TaskData> {
        self.opened.push(task);
        self.inner.open(task)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_centers() {
        let g = ConceptGenerator::denoiser(4);
        let (a, _) = generate_concepts(&g, 3, 10, 8).unwrap();
        let (b, _) = generate_concepts(&g, 3, 10, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].concept.centers, a[1].concept.centers);
    }

    #[test]
    fn single_task() {
        let (s, d) = generate_concepts(&ConceptGenerator::denoiser(0), 1, 5, 4).unwrap();
        assert_eq!((s.len(), d.len(), s[0].task), (1, 1, 1));
    }

    #[test]
    fn non_positive_noise_is_rejected() {
        let g = ConceptGenerator {
            noise_scale: 0.0,
            ..ConceptGenerator::denoiser(0)
        };
        assert!(matches!(generate_concepts(&g, 2, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn classifier_classes_are_consecutive() {
        let (s, d) = generate_concepts(&ConceptGenerator::classifier(1), 3, 1, 1).unwrap();
        assert_eq!(s[2].concept.classes, vec![4, 5]);
        assert_eq!(d[1].train.cols(), 64);
        assert!(d[1].train_labels.iter().all(|&c| c == 2 || c == 3));
    }

    #[test]
    fn source_hands_out_only_the_requested_task() {
        let (_, d) = generate_concepts(&ConceptGenerator::denoiser(2), 3, 1, 1).unwrap();
        let mut log = AccessLog::new(d.clone());
        let t2 = log.open(2).unwrap();
        assert_eq!(t2.task(), 2);
        assert_eq!(t2.len(), d[1].train.rows());
        assert!(matches!(log.open(9), Err(Error::UnknownConcept(9))));
        assert_eq!(log.opened(), &[2, 9]);
    }
}
