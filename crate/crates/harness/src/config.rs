//! Experiment configuration.
//!
//! A config file is UTF-8 text with one `key = value` pair per line. A `#`
//! starts a comment that runs to the end of the line; blank lines are
//! ignored. Keys are the field names listed in [`KEYS`]; lists are comma
//! separated. Later lines override earlier ones, and command-line flags
//! override the file. Keys left unset take the defaults of the selected
//! mode.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};
use stamina_core::data::ConceptGenerator;
use stamina_core::losses::{LossWeights, Mode};
use stamina_core::model::PretrainOptions;
use stamina_core::optim::OptimizerKind;
use stamina_core::trainer::{Ablation, Method, MethodConfig};

use crate::HarnessError;

pub const KEYS: [&str; 27] = [
    "mode",
    "n_tasks",
    "steps",
    "batch_size",
    "seed",
    "methods",
    "ablations",
    "rank",
    "tau",
    "learning_rate",
    "optimizer",
    "lambda_f",
    "lambda_s",
    "noise_scale",
    "center_scale",
    "anisotropy",
    "classes_per_task",
    "train_samples",
    "eval_samples",
    "gen_samples",
    "embed_dim",
    "pretrain_concepts",
    "pretrain_steps",
    "pretrain_batch",
    "pretrain_lr",
    "backbone_seed",
    "out",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub n_tasks: usize,
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds the concepts, the adapters and every training stream.
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Each entry adds a STAMINA run with that single ablation.
    pub ablations: Vec<Ablation>,
    pub rank: usize,
    pub tau: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Overrides the per-method forgetting weight when set.
    pub lambda_f: Option<f64>,
    pub lambda_s: Option<f64>,
    /// Concept generator; its seed is replaced by `seed`.
    pub generator: ConceptGenerator,
    /// Samples generated per concept at every boundary (denoiser mode).
    pub gen_samples: usize,
    pub embed_dim: usize,
    /// Backbone pretraining; `pretrain.seed` is the backbone seed.
    pub pretrain: PretrainOptions,
    pub out: PathBuf,
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Denoiser => "denoiser",
        Mode::Classifier => "classifier",
    }
}

pub fn parse_mode(s: &str) -> Result<Mode, HarnessError> {
    match s {
        "denoiser" => Ok(Mode::Denoiser),
        "classifier" => Ok(Mode::Classifier),
        _ => Err(HarnessError::Config(format!("unknown mode {s:?}"))),
    }
}

fn optimizer_name(o: OptimizerKind) -> &'static str {
    match o {
        OptimizerKind::Adam => "adam",
        OptimizerKind::Sgd => "sgd",
    }
}

/// Splits config text into `(key, value)` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, HarnessError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(HarnessError::Config(format!("line {}: unknown key {k:?}", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
    v.parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T, F>(v: &str, f: F) -> Result<Vec<T>, HarnessError>
where
    F: Fn(&str) -> Result<T, HarnessError>,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

impl ExperimentConfig {
    pub fn defaults(mode: Mode) -> Self {
        let (n_tasks, generator, pretrain_steps) = match mode {
            Mode::Denoiser => (10, ConceptGenerator::denoiser(0), 1500),
            Mode::Classifier => (5, ConceptGenerator::classifier(0), 600),
        };
        Self {
            mode,
            n_tasks,
            steps: 200,
            batch_size: 32,
            seed: 0,
            methods: Method::ALL.to_vec(),
            ablations: Vec::new(),
            rank: 4,
            tau: 0.5,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            lambda_f: None,
            lambda_s: None,
            generator,
            gen_samples: 128,
            embed_dim: 16,
            pretrain: PretrainOptions {
                concepts: 16,
                steps: pretrain_steps,
                batch: 64,
                lr: 3e-3,
                seed: 0,
            },
            out: PathBuf::from("runs"),
        }
    }

    /// Builds a config from pairs applied in order over the mode defaults.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, HarnessError> {
        let mode = match pairs.iter().rev().find(|(k, _)| k == "mode") {
            Some((_, v)) => parse_mode(v)?,
            None => Mode::Denoiser,
        };
        let mut c = Self::defaults(mode);
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), HarnessError> {
        let g = &mut self.generator;
        match key {
            "mode" => self.mode = parse_mode(v)?,
            "n_tasks" => self.n_tasks = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "methods" => {
                self.methods = list(v, |s| s.parse::<Method>().map_err(HarnessError::from))?
            }
            "ablations" => {
                self.ablations = list(v, |s| s.parse::<Ablation>().map_err(HarnessError::from))?
            }
            "rank" => self.rank = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(HarnessError::Config(format!("unknown optimizer {v:?}"))),
                }
            }
            "lambda_f" => self.lambda_f = Some(num(key, v)?),
            "lambda_s" => self.lambda_s = Some(num(key, v)?),
            "noise_scale" => g.noise_scale = num(key, v)?,
            "center_scale" => g.center_scale = num(key, v)?,
            "anisotropy" => g.anisotropy = num(key, v)?,
            "classes_per_task" => g.classes_per_task = num(key, v)?,
            "train_samples" => g.train_samples = num(key, v)?,
            "eval_samples" => g.eval_samples = num(key, v)?,
            "gen_samples" => self.gen_samples = num(key, v)?,
            "embed_dim" => self.embed_dim = num(key, v)?,
            "pretrain_concepts" => self.pretrain.concepts = num(key, v)?,
            "pretrain_steps" => self.pretrain.steps = num(key, v)?,
            "pretrain_batch" => self.pretrain.batch = num(key, v)?,
            "pretrain_lr" => self.pretrain.lr = num(key, v)?,
            "backbone_seed" => self.pretrain.seed = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(HarnessError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.n_tasks == 0 || self.steps == 0 || self.batch_size == 0 {
            return bad("n_tasks, steps and batch_size must be positive");
        }
        if self.methods.is_empty() && self.ablations.is_empty() {
            return bad("the grid is empty: set methods or ablations");
        }
        if self.mode == Mode::Denoiser && (self.gen_samples < 2 || self.embed_dim == 0) {
            return bad("denoiser runs need gen_samples >= 2 and a positive embed_dim");
        }
        if self.pretrain.concepts == 0 || self.pretrain.batch == 0 {
            return bad("pretraining needs concepts and a batch");
        }
        if self.mode == Mode::Denoiser && self.generator.classes_per_task != 1 {
            return bad("denoiser concepts have exactly one class");
        }
        self.generator.validate()?;
        for m in self.grid() {
            m.validate()?;
        }
        Ok(())
    }

    /// The concept generator for task concepts.
    pub fn task_generator(&self) -> ConceptGenerator {
        ConceptGenerator {
            seed: self.seed,
            ..self.generator
        }
    }

    /// The concept generator the backbone is pretrained on.
    pub fn pretrain_generator(&self) -> ConceptGenerator {
        ConceptGenerator {
            seed: self.pretrain.seed,
            ..self.generator
        }
    }

    /// One method configuration per grid entry, in report order.
    pub fn grid(&self) -> Vec<MethodConfig> {
        let base = |m: Method| {
            let mut c = MethodConfig::new(m, self.seed);
            c.rank = self.rank;
            c.tau = self.tau;
            c.learning_rate = self.learning_rate;
            c.optimizer = self.optimizer;
            if m != Method::Naive {
                c.weights = LossWeights {
                    lambda_f: self.lambda_f.unwrap_or(c.weights.lambda_f),
                    lambda_s: self.lambda_s.unwrap_or(c.weights.lambda_s),
                };
            }
            c
        };
        let mut out: Vec<MethodConfig> = Vec::new();
        let entries = self
            .methods
            .iter()
            .map(|&m| base(m))
            .chain(self.ablations.iter().map(|&a| base(Method::Stamina).with_ablation(a)));
        for c in entries {
            if !out.iter().any(|o| o.label() == c.label()) {
                out.push(c);
            }
        }
        out
    }

    /// Every set key except `out`, one `key = value` line each, sorted by
    /// key. The text parses back to the same config.
    pub fn canonical(&self) -> String {
        let g = &self.generator;
        let join = |v: Vec<&str>| v.join(", ");
        let mut pairs = vec![
            ("mode", mode_name(self.mode).to_string()),
            ("n_tasks", self.n_tasks.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("methods", join(self.methods.iter().map(|m| m.name()).collect())),
            ("ablations", join(self.ablations.iter().map(|a| a.name()).collect())),
            ("rank", self.rank.to_string()),
            ("tau", self.tau.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("optimizer", optimizer_name(self.optimizer).to_string()),
            ("noise_scale", g.noise_scale.to_string()),
            ("center_scale", g.center_scale.to_string()),
            ("anisotropy", g.anisotropy.to_string()),
            ("classes_per_task", g.classes_per_task.to_string()),
            ("train_samples", g.train_samples.to_string()),
            ("eval_samples", g.eval_samples.to_string()),
            ("gen_samples", self.gen_samples.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("pretrain_concepts", self.pretrain.concepts.to_string()),
            ("pretrain_steps", self.pretrain.steps.to_string()),
            ("pretrain_batch", self.pretrain.batch.to_string()),
            ("pretrain_lr", self.pretrain.lr.to_string()),
            ("backbone_seed", self.pretrain.seed.to_string()),
        ];
        if let Some(v) = self.lambda_f {
            pairs.push(("lambda_f", v.to_string()));
        }
        if let Some(v) = self.lambda_s {
            pairs.push(("lambda_s", v.to_string()));
        }
        pairs.sort_by_key(|(k, _)| *k);
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of [`canonical`](Self::canonical), hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn run_id(&self) -> String {
        format!(
            "{}-n{}-seed{}-{}",
            mode_name(self.mode),
            self.n_tasks,
            self.seed,
            &self.hash()[..12]
        )
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(self.run_id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(text: &str) -> Vec<(String, String)> {
        parse_pairs(text).unwrap()
    }

    #[test]
    fn comments_and_blank_lines() {
        let p = pairs("# header\n\nseed = 3  # trailing\nmethods = stamina, naive\n");
        let c = ExperimentConfig::from_pairs(&p).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.methods, vec![Method::Stamina, Method::Naive]);
    }

    #[test]
    fn later_pairs_win() {
        let mut p = pairs("seed = 1\nsteps = 50");
        p.push(("seed".into(), "9".into()));
        let c = ExperimentConfig::from_pairs(&p).unwrap();
        assert_eq!((c.seed, c.steps), (9, 50));
    }

    #[test]
    fn mode_selects_defaults() {
        let c = ExperimentConfig::from_pairs(&pairs("mode = classifier")).unwrap();
        assert_eq!(c.n_tasks, 5);
        assert_eq!(c.generator.seq_len, 4);
        let c = ExperimentConfig::from_pairs(&pairs("n_tasks = 3\nmode = classifier")).unwrap();
        assert_eq!(c.n_tasks, 3);
    }

    #[test]
    fn malformed_lines_are_reported() {
        assert!(matches!(parse_pairs("seed 3"), Err(HarnessError::Config(m)) if m.contains("line 1")));
        assert!(parse_pairs("colour = red").is_err());
        assert!(ExperimentConfig::from_pairs(&pairs("steps = many")).is_err());
        assert!(ExperimentConfig::from_pairs(&pairs("methods = lora")).is_err());
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = ExperimentConfig::from_pairs(&pairs("out = a")).unwrap();
        let b = ExperimentConfig::from_pairs(&pairs("out = b")).unwrap();
        let c = ExperimentConfig::from_pairs(&pairs("seed = 1")).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn grid_appends_ablations_without_duplicates() {
        let c = ExperimentConfig::from_pairs(&pairs(
            "methods = stamina, clora\nablations = no_mask, no_sparsity, no_mask",
        ))
        .unwrap();
        let labels: Vec<String> = c.grid().iter().map(|m| m.label()).collect();
        assert_eq!(labels.len(), 4);
        assert_eq!(labels[0], "stamina");
        assert!(c.grid()[2].has(Ablation::NoMask));
    }

    #[test]
    fn canonical_text_parses_back() {
        let c = ExperimentConfig::from_pairs(&pairs("mode = classifier\nlambda_f = 5\nablations = no_mask")).unwrap();
        let back = ExperimentConfig::from_pairs(&pairs(&c.canonical())).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn lambda_overrides_skip_naive() {
        let c = ExperimentConfig::from_pairs(&pairs("lambda_s = 0")).unwrap();
        let g = c.grid();
        assert_eq!(g[0].weights.lambda_s, 0.0);
        assert_eq!(g[2].weights, LossWeights::NONE);
    }
}
