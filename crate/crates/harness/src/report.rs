//! Metrics reports, the text table and plot-ready CSV series.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use stamina_core::losses::Mode;
use stamina_core::metrics;
use stamina_core::tensor::Tensor;
use stamina_core::trainer::{ContinualLog, MethodConfig};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryReport {
    pub label: String,
    pub method: String,
    pub ablations: Vec<String>,
    pub trainable_params: usize,
    pub backbone_params: usize,
    pub n_param_pct: f64,
    pub a_mmd: Option<f64>,
    pub f_mmd: Option<f64>,
    pub p_mmd: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub accuracy_forgetting: Option<f64>,
    pub accuracy_plasticity: Option<f64>,
    /// Per task, percent of the folded change on untouched positions.
    pub interference: Vec<f64>,
    /// `‖W_t − W_init‖` averaged over layers for `t = 0..=N`.
    pub weight_distance: Vec<f64>,
    /// Per task, quality right after learning it (MMD ×10³ or accuracy %).
    pub plasticity: Vec<f64>,
    pub mask_density: Vec<f64>,
    /// Task loss at every step, one curve per task.
    pub loss_curves: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub config_hash: String,
    pub mode: Mode,
    pub seed: u64,
    pub backbone_seed: u64,
    pub n_tasks: usize,
    pub steps: usize,
    pub entries: Vec<EntryReport>,
}

impl EntryReport {
    /// Metrics of one finished run. `dataset` holds the embedded held-out
    /// samples of every concept (denoiser mode only).
    pub fn from_log(cfg: &MethodConfig, log: &ContinualLog, dataset: Option<&[Tensor]>) -> Result<Self, HarnessError> {
        let n = log.completed;
        let optional = |r: stamina_core::Result<f64>| -> Result<Option<f64>, HarnessError> {
            match r {
                Ok(v) => Ok(Some(v)),
                Err(_) if n < 2 => Ok(None),
                Err(e) => Err(e.into()),
            }
        };
        let (mut a, mut f, mut p) = (None, None, None);
        let (mut acc, mut acc_f, mut acc_p) = (None, None, None);
        let plasticity = match dataset {
            Some(d) => {
                a = Some(metrics::a_mmd(log, d)?);
                f = optional(metrics::f_mmd(log))?;
                p = Some(metrics::p_mmd(log, d)?);
                metrics::plasticity_series(log, d)?
            }
            None => {
                let s = metrics::accuracy_plasticity_series(log)?;
                acc = Some(metrics::final_accuracy(log)?);
                acc_f = optional(metrics::accuracy_forgetting(log))?;
                acc_p = (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64);
                s
            }
        };
        Ok(Self {
            label: cfg.label(),
            method: cfg.method.name().to_string(),
            ablations: cfg.ablations.iter().map(|a| a.name().to_string()).collect(),
            trainable_params: log.trainable_params,
            backbone_params: log.backbone_params,
            n_param_pct: log.n_param_pct(),
            a_mmd: a,
            f_mmd: f,
            p_mmd: p,
            final_accuracy: acc,
            accuracy_forgetting: acc_f,
            accuracy_plasticity: acc_p,
            interference: metrics::interference_series(log),
            weight_distance: metrics::weight_distance_series(log),
            plasticity,
            mask_density: (1..=n).filter_map(|t| log.mask_density(t)).collect(),
            loss_curves: log
                .losses
                .iter()
                .map(|c| c.iter().map(|b| b.task).collect())
                .collect(),
        })
    }
}

/// Two decimals of the exact binary value, ties to even.
pub fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

fn cell(v: Option<f64>) -> String {
    v.map(fmt2).unwrap_or_else(|| "-".into())
}

/// Fixed-column table; numbers are rounded to two decimals, ties to even.
pub fn render(report: &MetricsReport) -> String {
    let metric_cols = match report.mode {
        Mode::Denoiser => ["A_mmd", "F_mmd", "P_mmd"],
        Mode::Classifier => ["Acc", "F_acc", "P_acc"],
    };
    let width = report
        .entries
        .iter()
        .map(|e| e.label.len())
        .max()
        .unwrap_or(0)
        .max("Method".len());
    let mut s = String::new();
    let _ = writeln!(s, "run {}  config {}", report.run_id, report.config_hash);
    let _ = writeln!(
        s,
        "{:<width$}  {:>10}  {:>12}  {:>12}  {:>12}",
        "Method", "N_param%", metric_cols[0], metric_cols[1], metric_cols[2]
    );
    for e in &report.entries {
        let vals = match report.mode {
            Mode::Denoiser => [e.a_mmd, e.f_mmd, e.p_mmd],
            Mode::Classifier => [e.final_accuracy, e.accuracy_forgetting, e.accuracy_plasticity],
        };
        let _ = writeln!(
            s,
            "{:<width$}  {:>10}  {:>12}  {:>12}  {:>12}",
            e.label,
            cell(Some(e.n_param_pct)),
            cell(vals[0]),
            cell(vals[1]),
            cell(vals[2])
        );
    }
    s
}

/// One CSV series: a `task` column then one column per entry. The first
/// line is a `#` comment carrying the config hash.
pub fn series_csv(report: &MetricsReport, first_task: usize, pick: impl Fn(&EntryReport) -> &[f64]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["task".to_string()];
    header.extend(report.entries.iter().map(|e| e.label.clone()));
    w.write_record(&header)?;
    let rows = report.entries.iter().map(|e| pick(e).len()).max().unwrap_or(0);
    for i in 0..rows {
        let mut rec = vec![(first_task + i).to_string()];
        rec.extend(
            report
                .entries
                .iter()
                .map(|e| pick(e).get(i).map(|v| v.to_string()).unwrap_or_default()),
        );
        w.write_record(&rec)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| HarnessError::Csv(e.to_string()))?)
        .expect("csv writes UTF-8");
    Ok(format!("# config {}\n{body}", report.config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(label: &str, a: f64) -> EntryReport {
        EntryReport {
            label: label.into(),
            method: "stamina".into(),
            ablations: vec![],
            trainable_params: 10,
            backbone_params: 40,
            n_param_pct: 25.0,
            a_mmd: Some(a),
            f_mmd: None,
            p_mmd: Some(0.125),
            final_accuracy: None,
            accuracy_forgetting: None,
            accuracy_plasticity: None,
            interference: vec![100.0, 50.0],
            weight_distance: vec![0.0, 1.0, 1.5],
            plasticity: vec![3.0, 4.0],
            mask_density: vec![0.1, 0.2],
            loss_curves: vec![],
        }
    }

    fn report(entries: Vec<EntryReport>) -> MetricsReport {
        MetricsReport {
            run_id: "r".into(),
            config_hash: "abc".into(),
            mode: Mode::Denoiser,
            seed: 0,
            backbone_seed: 0,
            n_tasks: 2,
            steps: 1,
            entries,
        }
    }

    #[test]
    fn empty_grid_renders_header_only() {
        let t = render(&report(vec![]));
        assert_eq!(t.lines().count(), 2);
        assert!(t.lines().nth(1).unwrap().starts_with("Method"));
    }

    #[test]
    fn single_run_renders_one_row() {
        let t = render(&report(vec![entry("stamina", 2.675)]));
        let row = t.lines().nth(2).unwrap();
        assert!(row.starts_with("stamina"));
        assert!(row.contains("25.00") && row.contains("0.12") && row.contains(" -"));
    }

    #[test]
    fn series_are_wide_tables() {
        let r = report(vec![entry("stamina", 1.0), entry("clora", 2.0)]);
        let s = series_csv(&r, 0, |e| &e.weight_distance).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "# config abc");
        assert_eq!(lines[1], "task,stamina,clora");
        assert_eq!(lines[3], "1,1,1");
        assert_eq!(lines.len(), 5);
    }
}
