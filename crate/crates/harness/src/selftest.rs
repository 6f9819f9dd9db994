//! Fast invariant checks behind `stamina selftest`.

use stamina_core::adapters::{AdaptedLinear, MaskMlp};
use stamina_core::checkpoint::{deployed_bytes, ModelCheckpoint};
use stamina_core::metrics::mmd2;
use stamina_core::model::{AdaptedWeight, Learner};
use stamina_core::rng;
use stamina_core::tensor::Tensor;
use stamina_core::trainer::{Method, MethodConfig};

use crate::config::ExperimentConfig;
use crate::experiment::{backbone, run_entry, Backbone, Tasks};

pub struct Check {
    pub name: &'static str,
    pub outcome: Result<(), String>,
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fold_equivalence() -> Result<(), String> {
    for seed in 0..5u64 {
        let mut r = rng::keyed(seed, &[0x5e1f]);
        let cfg = MethodConfig::new(Method::Stamina, seed).adapter_config();
        let w = Tensor::randn(&[8, 8], 1.0, &mut r);
        let mut layer = AdaptedLinear::new(0, w, cfg).map_err(|e| e.to_string())?;
        layer
            .set_factors(Tensor::randn(&[8, cfg.rank], 0.5, &mut r), Tensor::randn(&[cfg.rank, 8], 0.5, &mut r))
            .map_err(|e| e.to_string())?;
        layer
            .set_mask_mlp(MaskMlp::init(cfg.rank, 8, 8, &mut r))
            .map_err(|e| e.to_string())?;
        let x = Tensor::randn(&[4, 8], 1.0, &mut r);
        let live = layer
            .effective_weight_value(&layer.fold_mask().map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        layer.fold().map_err(|e| e.to_string())?;
        let a = x.matmul(&live).map_err(|e| e.to_string())?;
        let b = x.matmul(layer.w_prev()).map_err(|e| e.to_string())?;
        let diff = a.max_abs_diff(&b);
        ensure(diff <= 1e-10, || format!("seed {seed}: folded output differs by {diff:e}"))?;
    }
    Ok(())
}

fn mmd_oracle() -> Result<(), String> {
    let mut r = rng::keyed(7, &[0x3d]);
    let x = Tensor::randn(&[5, 3], 1.0, &mut r);
    let y = Tensor::randn(&[4, 3], 1.0, &mut r).add(&Tensor::full(&[4, 3], 0.5)).unwrap();
    let k = |a: &[f64], b: &[f64]| (a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / 3.0 + 1.0).powi(3);
    let mut xx = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            if i != j {
                xx += k(x.row(i), x.row(j));
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                yy += k(y.row(i), y.row(j));
            }
        }
    }
    let mut xy = 0.0;
    for i in 0..5 {
        for j in 0..4 {
            xy += k(x.row(i), y.row(j));
        }
    }
    let oracle = xx / 20.0 + yy / 12.0 - 2.0 * xy / 20.0;
    let got = mmd2(&x, &y).map_err(|e| e.to_string())?;
    ensure((got - oracle).abs() <= 1e-10, || format!("mmd {got} vs oracle {oracle}"))?;
    let same = mmd2(&x, &x).map_err(|e| e.to_string())?;
    ensure(same == 0.0, || format!("mmd of a set with itself is {same}"))
}

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::defaults(stamina_core::losses::Mode::Denoiser);
    c.n_tasks = 2;
    c.steps = 4;
    c.methods = vec![Method::Stamina];
    c.gen_samples = 16;
    c.pretrain.steps = 10;
    c.out = std::env::temp_dir().join(format!("stamina-selftest-{}", std::process::id()));
    c
}

fn determinism_and_checkpoint() -> Result<(), String> {
    let cfg = tiny_config();
    let result = (|| -> Result<(), String> {
        let bb = backbone(&cfg).map_err(|e| e.to_string())?;
        let tasks = Tasks::new(&cfg).map_err(|e| e.to_string())?;
        let mc = &cfg.grid()[0];
        let dir = cfg.run_dir();
        let a = run_entry(&cfg, mc, &bb, &tasks, &dir, false).map_err(|e| e.to_string())?;
        let b = run_entry(&cfg, mc, &bb, &tasks, &dir, false).map_err(|e| e.to_string())?;
        ensure(a == b, || "two identical runs produced different logs".into())?;
        let Backbone::Denoiser(d) = &bb else { unreachable!() };
        let mut fresh = stamina_core::model::DenoiserModel::new(d.clone(), mc).map_err(|e| e.to_string())?;
        let before = deployed_bytes(fresh.layers()).len();
        let file = dir.join("checkpoints/task_2").join(format!("{}.json", mc.label()));
        let text = std::fs::read_to_string(&file).map_err(|e| format!("{}: {e}", file.display()))?;
        let ck: crate::experiment::CheckpointFile = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        ck.model.restore_into(&mut fresh).map_err(|e| e.to_string())?;
        ensure(ModelCheckpoint::capture(&fresh, 2) == ck.model, || "checkpoint does not round-trip".into())?;
        ensure(deployed_bytes(fresh.layers()).len() == before, || "folding changed the deployed size".into())?;
        ensure(fresh.layers().iter().all(|l| matches!(l, AdaptedWeight::Masked(_))), || {
            "unexpected layer kind".into()
        })
    })();
    let _ = std::fs::remove_dir_all(&cfg.out);
    result
}

pub fn run_all() -> Vec<Check> {
    vec![
        Check {
            name: "fold equivalence",
            outcome: fold_equivalence(),
        },
        Check {
            name: "mmd oracle",
            outcome: mmd_oracle(),
        },
        Check {
            name: "determinism and checkpoint round trip",
            outcome: determinism_and_checkpoint(),
        },
    ]
}
