//! Runs the method grid of one config and writes its outputs.
//!
//! A run directory holds `config.txt`, `report.json`, `report.txt`, the
//! three `series_*.csv` files, `logs/<label>.json` and
//! `checkpoints/task_<t>/<label>.json`. Pretrained backbones are cached under
//! `<out>/cache` and shared by every run with the same backbone settings.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stamina_core::checkpoint::ModelCheckpoint;
use stamina_core::data::{generate_concepts, ConceptData};
use stamina_core::json;
use stamina_core::losses::Mode;
use stamina_core::metrics::Embedder;
use stamina_core::model::{
    ClassifierBackbone, ClassifierConfig, ClassifierModel, DenoiserBackbone, DenoiserConfig,
    DenoiserModel, EvalContext, Learner,
};
use stamina_core::tensor::Tensor;
use stamina_core::trainer::{resume_sequence, ContinualLog, MethodConfig, TaskSpec};

use crate::config::{parse_pairs, ExperimentConfig};
use crate::report::{render, series_csv, EntryReport, MetricsReport};
use crate::HarnessError;

/// Per-task checkpoint of one grid entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub config_hash: String,
    pub label: String,
    pub model: ModelCheckpoint,
    pub log: ContinualLog,
}

/// A finished run's log as stored under `logs/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogFile {
    pub config_hash: String,
    pub log: ContinualLog,
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Denoiser(Arc<DenoiserBackbone>),
    Classifier(Arc<ClassifierBackbone>),
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(HarnessError::io(path))?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    let tmp = path.with_extension(format!(
        "tmp-{}-{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    fs::write(&tmp, contents).map_err(HarnessError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(HarnessError::io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T, pretty: bool) -> Result<(), HarnessError> {
    let text = if pretty {
        json::to_string_pretty(value)
    } else {
        json::to_string(value)
    }
    .map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomic(path, text.as_bytes())
}

fn denoiser_config(cfg: &ExperimentConfig) -> DenoiserConfig {
    DenoiserConfig {
        data_dim: cfg.generator.dim,
        ..DenoiserConfig::default()
    }
}

fn classifier_config(cfg: &ExperimentConfig) -> ClassifierConfig {
    ClassifierConfig {
        dim: cfg.generator.dim,
        seq_len: cfg.generator.seq_len,
        n_classes: cfg.n_tasks * cfg.generator.classes_per_task,
    }
}

/// Loads the pretrained backbone from the cache, training it on a miss.
pub fn backbone(cfg: &ExperimentConfig) -> Result<Backbone, HarnessError> {
    let gen = cfg.pretrain_generator();
    let key = match cfg.mode {
        Mode::Denoiser => serde_json::to_string(&(denoiser_config(cfg), gen, cfg.pretrain)),
        Mode::Classifier => serde_json::to_string(&(classifier_config(cfg), gen, cfg.pretrain)),
    }
    .expect("backbone settings serialize");
    let hash = hex::encode(Sha256::digest(key.as_bytes()));
    let path = cfg.out.join("cache").join(format!("backbone-{}.json", &hash[..16]));
    Ok(match cfg.mode {
        Mode::Denoiser => {
            let b = match read_json(&path) {
                Ok(b) => b,
                Err(_) => {
                    let b = DenoiserBackbone::pretrain(denoiser_config(cfg), &gen, &cfg.pretrain)?;
                    write_json(&path, &b, false)?;
                    b
                }
            };
            Backbone::Denoiser(Arc::new(b))
        }
        Mode::Classifier => {
            let b = match read_json(&path) {
                Ok(b) => b,
                Err(_) => {
                    let b = ClassifierBackbone::pretrain(classifier_config(cfg), &gen, &cfg.pretrain)?;
                    write_json(&path, &b, false)?;
                    b
                }
            };
            Backbone::Classifier(Arc::new(b))
        }
    })
}

/// Task specs, data splits and evaluation inputs shared by every entry.
pub struct Tasks {
    pub specs: Vec<TaskSpec>,
    pub data: Vec<ConceptData>,
    pub embedder: Embedder,
    /// Embedded held-out samples `X_{D,j}`, denoiser mode only.
    pub dataset: Option<Vec<Tensor>>,
}

impl Tasks {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let gen = cfg.task_generator();
        let (specs, data) = generate_concepts(&gen, cfg.n_tasks, cfg.steps, cfg.batch_size)?;
        let embedder = Embedder::projection(gen.width(), cfg.embed_dim, cfg.pretrain.seed)?;
        let dataset = match cfg.mode {
            Mode::Denoiser => Some(
                data.iter()
                    .map(|d| embedder.embed(&d.eval))
                    .collect::<stamina_core::Result<Vec<_>>>()?,
            ),
            Mode::Classifier => None,
        };
        Ok(Self {
            specs,
            data,
            embedder,
            dataset,
        })
    }
}

fn checkpoint_path(dir: &Path, task: u32, label: &str) -> PathBuf {
    dir.join("checkpoints")
        .join(format!("task_{task}"))
        .join(format!("{label}.json"))
}

/// Latest checkpoint of `label`, if any.
fn latest_checkpoint(dir: &Path, label: &str, n: usize, hash: &str) -> Result<Option<CheckpointFile>, HarnessError> {
    for t in (1..=n as u32).rev() {
        let p = checkpoint_path(dir, t, label);
        if p.exists() {
            let c: CheckpointFile = read_json(&p)?;
            if c.config_hash != hash {
                return Err(HarnessError::HashMismatch {
                    expected: hash.to_string(),
                    found: c.config_hash,
                });
            }
            if c.label != label || c.log.completed != t || c.model.completed != t {
                return Err(HarnessError::Config(format!("{}: inconsistent checkpoint", p.display())));
            }
            return Ok(Some(c));
        }
    }
    Ok(None)
}

fn run_learner<L: Learner>(
    mut model: L,
    cfg: &ExperimentConfig,
    mc: &MethodConfig,
    tasks: &Tasks,
    dir: &Path,
    resume: bool,
) -> Result<ContinualLog, HarnessError> {
    let hash = cfg.hash();
    let label = mc.label();
    let mut log = ContinualLog::new(&label, cfg.mode);
    if resume {
        if let Some(c) = latest_checkpoint(dir, &label, cfg.n_tasks, &hash)? {
            c.model.restore_into(&mut model)?;
            log = c.log;
        }
    }
    let ctx = EvalContext {
        embedder: &tasks.embedder,
        gen_samples: cfg.gen_samples,
        gen_seed: cfg.seed,
        eval: &tasks.data,
    };
    let mut source = tasks.data.clone();
    let mut io_error = None;
    let res = resume_sequence(&mut model, &tasks.specs, mc, &mut source, &ctx, &mut log, |m, l| {
        let file = CheckpointFile {
            config_hash: hash.clone(),
            label: label.clone(),
            model: ModelCheckpoint::capture(m, l.completed),
            log: l.clone(),
        };
        if let Err(e) = write_json(&checkpoint_path(dir, l.completed, &label), &file, false) {
            io_error = Some(e);
            return Err(stamina_core::Error::Config("checkpoint write failed".into()));
        }
        Ok(())
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    res?;
    Ok(log)
}

/// Trains one grid entry, continuing from its latest checkpoint when
/// `resume` is set.
pub fn run_entry(
    cfg: &ExperimentConfig,
    mc: &MethodConfig,
    backbone: &Backbone,
    tasks: &Tasks,
    dir: &Path,
    resume: bool,
) -> Result<ContinualLog, HarnessError> {
    match backbone {
        Backbone::Denoiser(b) => run_learner(DenoiserModel::new(b.clone(), mc)?, cfg, mc, tasks, dir, resume),
        Backbone::Classifier(b) => {
            run_learner(ClassifierModel::new(b.clone(), mc)?, cfg, mc, tasks, dir, resume)
        }
    }
}

/// `STAMINA_THREADS`, defaulting to one worker.
pub fn threads_from_env() -> usize {
    std::env::var("STAMINA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Runs every grid entry on the shared tasks and writes the run directory.
pub fn run_experiment(cfg: &ExperimentConfig, resume: bool, threads: usize) -> Result<MetricsReport, HarnessError> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    let ckpts = dir.join("checkpoints");
    if !resume && ckpts.exists() {
        fs::remove_dir_all(&ckpts).map_err(HarnessError::io(&ckpts))?;
    }
    fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
    let text = format!("# config {}\n{}", cfg.hash(), cfg.canonical());
    write_atomic(&dir.join("config.txt"), text.as_bytes())?;
    let backbone = backbone(cfg)?;
    let tasks = Tasks::new(cfg)?;
    let grid = cfg.grid();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ContinualLog, HarnessError>>>> =
        Mutex::new((0..grid.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, grid.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(mc) = grid.get(i) else { break };
                let r = run_entry(cfg, mc, &backbone, &tasks, &dir, resume);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    let hash = cfg.hash();
    let mut logs = Vec::with_capacity(grid.len());
    for r in results.into_inner().expect("worker panicked") {
        logs.push(r.expect("every entry ran")?);
    }
    for log in &logs {
        let file = LogFile {
            config_hash: hash.clone(),
            log: log.clone(),
        };
        write_json(&dir.join("logs").join(format!("{}.json", log.label)), &file, false)?;
    }
    let report = build_report(cfg, &grid, &logs, tasks.dataset.as_deref())?;
    write_outputs(&dir, &report)?;
    Ok(report)
}

pub fn build_report(
    cfg: &ExperimentConfig,
    grid: &[MethodConfig],
    logs: &[ContinualLog],
    dataset: Option<&[Tensor]>,
) -> Result<MetricsReport, HarnessError> {
    let entries = grid
        .iter()
        .zip(logs)
        .map(|(mc, log)| EntryReport::from_log(mc, log, dataset))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricsReport {
        run_id: cfg.run_id(),
        config_hash: cfg.hash(),
        mode: cfg.mode,
        seed: cfg.seed,
        backbone_seed: cfg.pretrain.seed,
        n_tasks: cfg.n_tasks,
        steps: cfg.steps,
        entries,
    })
}

/// Writes `report.json`, `report.txt` and the series CSVs.
pub fn write_outputs(dir: &Path, report: &MetricsReport) -> Result<(), HarnessError> {
    write_json(&dir.join("report.json"), report, true)?;
    write_atomic(&dir.join("report.txt"), render(report).as_bytes())?;
    let series: [(&str, usize, fn(&EntryReport) -> &[f64]); 3] = [
        ("series_interference.csv", 1, |e| &e.interference),
        ("series_weight_distance.csv", 0, |e| &e.weight_distance),
        ("series_plasticity.csv", 1, |e| &e.plasticity),
    ];
    for (name, first, pick) in series {
        write_atomic(&dir.join(name), series_csv(report, first, pick)?.as_bytes())?;
    }
    Ok(())
}

/// Reads the config a run directory was produced with.
pub fn load_run_config(dir: &Path) -> Result<ExperimentConfig, HarnessError> {
    let p = dir.join("config.txt");
    let text = fs::read_to_string(&p).map_err(HarnessError::io(&p))?;
    let mut cfg = ExperimentConfig::from_pairs(&parse_pairs(&text)?)?;
    cfg.out = dir.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(cfg)
}

/// Recomputes the report of a finished run from its saved logs.
pub fn recompute_metrics(dir: &Path) -> Result<MetricsReport, HarnessError> {
    let cfg = load_run_config(dir)?;
    let hash = cfg.hash();
    let grid = cfg.grid();
    let mut logs = Vec::with_capacity(grid.len());
    for mc in &grid {
        let f: LogFile = read_json(&dir.join("logs").join(format!("{}.json", mc.label())))?;
        if f.config_hash != hash {
            return Err(HarnessError::HashMismatch {
                expected: hash,
                found: f.config_hash,
            });
        }
        logs.push(f.log);
    }
    let tasks = Tasks::new(&cfg)?;
    let report = build_report(&cfg, &grid, &logs, tasks.dataset.as_deref())?;
    write_outputs(dir, &report)?;
    Ok(report)
}
