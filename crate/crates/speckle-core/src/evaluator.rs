//! Confusion-matrix metrics and the ablation matrix runner.
//!
//! Metrics are macro-averaged: per-class recall, precision, and F1 are
//! computed from the confusion matrix and averaged unweighted over classes.
//! Classes with an empty denominator contribute zero and raise a flag
//! instead of poisoning the averages. The ablation runner trains the six
//! stage on/off combinations (V0 through V4 and full) across seeds with
//! identical data order and appends one CSV row per finished run, so an
//! interrupted sweep resumes where it stopped.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::model::{ModelError, RecognitionModel};
use crate::tensor::TensorError;
use crate::trainer::{fit, FitReport, TrainConfig, TrainError};

/// Errors of the pure tallying and metric formulas.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("class id {value} out of range for {classes} classes")]
    OutOfRange { value: usize, classes: usize },
    #[error("{preds} predictions against {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("metrics need a nonempty confusion matrix")]
    EmptyMatrix,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("ablation run {config} seed {seed}: {source}")]
    Run {
        config: &'static str,
        seed: u64,
        #[source]
        source: TrainError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ablation csv {path} has header {found:?}, expected {expected:?}")]
    CsvHeader {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("config {config} must keep the augmenter and refiner idle, but counted {virtuals} virtual features and {refiner_calls} refiner calls")]
    BaselineLeak {
        config: &'static str,
        virtuals: usize,
        refiner_calls: usize,
    },
}

/// Row-per-true-class, column-per-predicted-class counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth][pred]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Element-wise addition; merging partial matrices equals building one
    /// from the concatenated streams.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes(), other.classes(), "class count mismatch");
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, oc) in row.iter_mut().zip(orow) {
                *c += oc;
            }
        }
    }
}

/// Tallies predictions against labels into a `classes x classes` matrix.
pub fn confusion(
    preds: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        for value in [p, t] {
            if value >= classes {
                return Err(MetricsError::OutOfRange { value, classes });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Per-class and macro-averaged classification metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class_recall: Vec<f64>,
    pub per_class_precision: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub macro_recall: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// Set when any class hit a zero denominator and contributed 0.
    pub zero_division: bool,
}

fn guarded(numer: f64, denom: f64, flag: &mut bool) -> f64 {
    if denom == 0.0 {
        *flag = true;
        0.0
    } else {
        numer / denom
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let k = cm.classes();
    let total = cm.total();
    if k == 0 || total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let mut zero_division = false;
    let mut recall = Vec::with_capacity(k);
    let mut precision = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    let mut trace = 0usize;
    for i in 0..k {
        let tp = cm.counts[i][i];
        trace += tp;
        let row: usize = cm.counts[i].iter().sum();
        let col: usize = cm.counts.iter().map(|r| r[i]).sum();
        let r = guarded(tp as f64, row as f64, &mut zero_division);
        let p = guarded(tp as f64, col as f64, &mut zero_division);
        recall.push(r);
        precision.push(p);
        f1.push(guarded(2.0 * p * r, p + r, &mut zero_division));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / k as f64;
    Ok(MetricsReport {
        macro_recall: mean(&recall),
        macro_precision: mean(&precision),
        macro_f1: mean(&f1),
        accuracy: trace as f64 / total as f64,
        per_class_recall: recall,
        per_class_precision: precision,
        per_class_f1: f1,
        zero_division,
    })
}

/// Runs the model over a dataset in evaluation mode, in fixed-size chunks.
pub fn evaluate_model(
    model: &RecognitionModel,
    dataset: &Dataset,
    chunk: usize,
) -> Result<(ConfusionMatrix, MetricsReport), EvalError> {
    let preds = model.predict_dataset(dataset, chunk)?;
    let cm = confusion(&preds, &dataset.labels, dataset.classes())?;
    let report = metrics(&cm)?;
    Ok((cm, report))
}

/// The six stage combinations, as (name, augmenter, adaptive, refiner).
pub const ABLATION_CONFIGS: [(&str, bool, bool, bool); 6] = [
    ("V0", false, false, false),
    ("V1", true, false, false),
    ("V2", true, true, false),
    ("V3", true, false, true),
    ("V4", false, false, true),
    ("full", true, true, true),
];

/// One finished ablation run.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub config: &'static str,
    pub seed: u64,
    pub accuracy: f64,
    pub per_class_recall: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct AblationTable {
    /// Every row of the study, freshly trained or reloaded from the CSV.
    pub rows: Vec<AblationRow>,
    /// How many of the rows were reloaded instead of retrained.
    pub resumed: usize,
}

impl AblationTable {
    /// Mean accuracy per config, sorted descending.
    pub fn config_means(&self) -> Vec<(&'static str, f64)> {
        let mut means = Vec::new();
        for (name, ..) in ABLATION_CONFIGS {
            let accs: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.config == name)
                .map(|r| r.accuracy)
                .collect();
            if !accs.is_empty() {
                means.push((name, accs.iter().sum::<f64>() / accs.len() as f64));
            }
        }
        means.sort_by(|a, b| b.1.total_cmp(&a.1));
        means
    }

    pub fn mean_of(&self, config: &str) -> Option<f64> {
        self.config_means()
            .into_iter()
            .find(|(name, _)| *name == config)
            .map(|(_, m)| m)
    }
}

fn csv_header(class_names: &[String]) -> String {
    let mut h = String::from("config,seed,accuracy");
    for name in class_names {
        let _ = write!(h, ",{name}");
    }
    h
}

/// A CSV row from an earlier, possibly interrupted study.
#[derive(Debug)]
struct DoneRow {
    config: String,
    seed: u64,
    accuracy: f64,
    per_class_recall: Vec<f64>,
}

fn parse_done_rows(path: &Path, expected_header: &str) -> Result<Vec<DoneRow>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != expected_header {
        return Err(EvalError::CsvHeader {
            path: path.to_path_buf(),
            found: header.to_string(),
            expected: expected_header.to_string(),
        });
    }
    Ok(lines
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| {
            let mut parts = l.split(',');
            let config = parts.next()?.to_string();
            let seed = parts.next()?.parse().ok()?;
            let accuracy = parts.next()?.parse().ok()?;
            let per_class_recall = parts.map(|p| p.parse().ok()).collect::<Option<Vec<f64>>>()?;
            Some(DoneRow {
                config,
                seed,
                accuracy,
                per_class_recall,
            })
        })
        .collect())
}

/// Trains every ablation config for every seed, appending finished rows to
/// `csv_path`. Rows already present are skipped, with data order fixed per
/// seed so every config sees identical batches.
pub fn run_ablation(
    train: &Dataset,
    test: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
    csv_path: &Path,
    work_dir: &Path,
) -> Result<AblationTable, EvalError> {
    let header = csv_header(&train.class_names);
    let done = if csv_path.exists() {
        parse_done_rows(csv_path, &header)?
    } else {
        if let Some(parent) = csv_path.parent() {
            fs::create_dir_all(parent).map_err(|source| EvalError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        fs::write(csv_path, format!("{header}\n")).map_err(|source| EvalError::Io {
            path: csv_path.to_path_buf(),
            source,
        })?;
        Vec::new()
    };
    let mut table = AblationTable::default();
    let mut file = fs::OpenOptions::new()
        .append(true)
        .open(csv_path)
        .map_err(|source| EvalError::Io {
            path: csv_path.to_path_buf(),
            source,
        })?;
    for (config, efa, ada, dhfr) in ABLATION_CONFIGS {
        for &seed in seeds {
            if let Some(old) = done.iter().find(|d| d.config == config && d.seed == seed) {
                table.resumed += 1;
                table.rows.push(AblationRow {
                    config,
                    seed,
                    accuracy: old.accuracy,
                    per_class_recall: old.per_class_recall.clone(),
                });
                continue;
            }
            let mut cfg = base.clone();
            cfg.efa = efa;
            cfg.ada = ada;
            cfg.dhfr = dhfr;
            cfg.seed = seed;
            let run_dir = work_dir.join(format!("{config}_seed{seed}"));
            let report =
                fit(train, test, &cfg, &run_dir).map_err(|source| EvalError::Run {
                    config,
                    seed,
                    source,
                })?;
            check_wiring(config, efa, dhfr, &report)?;
            let row = AblationRow {
                config,
                seed,
                accuracy: report.final_accuracy,
                per_class_recall: report.final_per_class_recall.clone(),
            };
            let mut line = format!("{},{},{}", row.config, row.seed, row.accuracy);
            for r in &row.per_class_recall {
                let _ = write!(line, ",{r}");
            }
            writeln!(file, "{line}").map_err(|source| EvalError::Io {
                path: csv_path.to_path_buf(),
                source,
            })?;
            file.flush().map_err(|source| EvalError::Io {
                path: csv_path.to_path_buf(),
                source,
            })?;
            table.rows.push(row);
        }
    }
    Ok(table)
}

/// Disabled stages must leave zero footprint in the call counters.
fn check_wiring(
    config: &'static str,
    efa: bool,
    dhfr: bool,
    report: &FitReport,
) -> Result<(), EvalError> {
    let bad_virtuals = !efa && report.virtual_features > 0;
    let bad_refiner = !dhfr && report.refiner_calls > 0;
    if bad_virtuals || bad_refiner {
        return Err(EvalError::BaselineLeak {
            config,
            virtuals: report.virtual_features,
            refiner_calls: report.refiner_calls,
        });
    }
    Ok(())
}
