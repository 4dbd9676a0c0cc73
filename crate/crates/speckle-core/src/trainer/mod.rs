//! Training loop: warmup plus cosine-annealed SGD over balanced batches,
//! a per-epoch metrics log, and a final checkpoint.
//!
//! Every random choice derives from the run seed through labeled streams
//! (model init, batch planning per epoch, virtual-feature mixing), so a
//! fixed (seed, config, dataset) triple reproduces the loss trajectory and
//! the metrics CSV byte for byte. Batch planning depends only on the seed
//! and epoch, never on the stage flags; ablation variants therefore see
//! identical batches. The reported final accuracy is computed from the
//! saved checkpoint after reloading it, so evaluating the artifact gives
//! exactly the same number.

pub mod checkpoint;
pub mod optim;

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::augmenter::AugmenterError;
use crate::data::sampler::{plan_batches, SamplerError};
use crate::data::{DataError, Dataset};
use crate::evaluator::{confusion, metrics, MetricsError};
use crate::model::{ModelConfig, ModelError, RecognitionModel};
use crate::params::ParamSet;
use crate::rng::{derive, seeded};
use crate::tensor::{Tape, TensorError};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta, LoadedCheckpoint,
};
pub use optim::{sgd_step, OptimState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("training needs at least 1 epoch")]
    NoEpochs,
    #[error("warmup ({warmup} epochs) must not reach the total epoch count ({epochs})")]
    WarmupTooLong { warmup: usize, epochs: usize },
    #[error("cosine period must be at least 1")]
    ZeroCosinePeriod,
    #[error("velocity buffer for {name:?} has {actual} values, parameter has {expected}")]
    VelocityShape {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("training data has {train} classes but test data has {test}")]
    ClassMismatch { train: usize, test: usize },
}

/// Full recipe for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Linear ramp length; the cosine decay starts when it ends.
    pub warmup_epochs: usize,
    /// Epochs per half cosine cycle after warmup.
    pub cosine_period: usize,
    /// Distinct classes drawn into every batch.
    pub batch_classes: usize,
    /// Samples per drawn class, so batches hold `batch_classes *
    /// batch_per_class` images.
    pub batch_per_class: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the recognition loss.
    pub lambda1: f64,
    /// Weight of the adaptive hinge loss.
    pub lambda2: f64,
    /// Exponent of the margin intensity.
    pub rho: f64,
    pub seed: u64,
    /// Stage switch: synthesize virtual features.
    pub efa: bool,
    /// Stage switch: adaptive hinge on hard-pair similarities.
    pub ada: bool,
    /// Stage switch: dynamic feature refiner.
    pub dhfr: bool,
    /// Mine pairs on flattened maps instead of pooled embeddings.
    pub flat_similarity: bool,
    /// Images per forward pass during evaluation.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 160,
            warmup_epochs: 15,
            cosine_period: 320,
            batch_classes: 4,
            batch_per_class: 4,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-5,
            lambda1: 1.0,
            lambda2: 0.8,
            rho: 1.0,
            seed: 0,
            efa: true,
            ada: true,
            dhfr: true,
            flat_similarity: false,
            eval_chunk: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::NoEpochs);
        }
        if self.warmup_epochs >= self.epochs {
            return Err(TrainError::WarmupTooLong {
                warmup: self.warmup_epochs,
                epochs: self.epochs,
            });
        }
        if self.cosine_period == 0 {
            return Err(TrainError::ZeroCosinePeriod);
        }
        Ok(())
    }

    fn model_config(&self, classes: usize) -> ModelConfig {
        ModelConfig {
            classes,
            use_augmenter: self.efa,
            use_adaptive: self.ada,
            use_refiner: self.dhfr,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            rho: self.rho,
            flat_similarity: self.flat_similarity,
        }
    }
}

/// Learning rate at an epoch: linear warmup to `base_lr`, then half-cosine
/// decay with the configured period.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    let phase = PI * (epoch - cfg.warmup_epochs) as f64 / cfg.cosine_period as f64;
    cfg.base_lr * 0.5 * (1.0 + phase.cos())
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-mean recognition loss.
    pub l_reg: f64,
    /// Batch-mean adaptive loss.
    pub l_ada: f64,
    /// Batch-mean weighted total.
    pub l_total: f64,
    pub test_accuracy: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,l_reg,l_ada,l_total,test_accuracy";

impl EpochRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.lr, self.l_reg, self.l_ada, self.l_total, self.test_accuracy
        )
    }
}

/// Summary of a finished run plus the paths of its artifacts.
pub struct FitReport {
    /// Test accuracy of the reloaded final checkpoint.
    pub final_accuracy: f64,
    pub final_per_class_recall: Vec<f64>,
    pub epoch_rows: Vec<EpochRow>,
    pub metrics_path: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Total virtual features synthesized across all steps.
    pub virtual_features: usize,
    /// Total refiner forward passes during training steps.
    pub refiner_calls: usize,
    /// Total anchors mined for pairs.
    pub pairs_mined: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn eval_accuracy(
    model: &RecognitionModel,
    test: &Dataset,
    chunk: usize,
) -> Result<(f64, Vec<f64>), TrainError> {
    let preds = model.predict_dataset(test, chunk)?;
    let cm = confusion(&preds, &test.labels, test.classes())?;
    let report = metrics(&cm)?;
    Ok((report.accuracy, report.per_class_recall))
}

/// Trains a model on `train`, logging per-epoch metrics against `test`
/// into `out_dir/metrics.csv` and saving the final model to
/// `out_dir/checkpoint`.
pub fn fit(
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<FitReport, TrainError> {
    cfg.validate()?;
    if train.classes() != test.classes() {
        return Err(TrainError::ClassMismatch {
            train: train.classes(),
            test: test.classes(),
        });
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut params = ParamSet::new();
    let mut init_rng = seeded(derive(cfg.seed, "model-init", 0));
    let model = RecognitionModel::init(&mut params, cfg.model_config(train.classes()), &mut init_rng)?;
    let mut optim = OptimState::new(cfg.momentum, cfg.weight_decay);
    let mut mix_rng = seeded(derive(cfg.seed, "virtual-mixing", 1));

    let metrics_path = out_dir.join("metrics.csv");
    let mut log = fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    writeln!(log, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;

    let mut epoch_rows = Vec::with_capacity(cfg.epochs);
    let mut virtual_features = 0;
    let mut refiner_calls = 0;
    let mut pairs_mined = 0;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut plan_rng = seeded(derive(cfg.seed, "batch-plan", epoch as u64));
        let batches = plan_batches(
            &train.labels,
            train.classes(),
            cfg.batch_classes,
            cfg.batch_per_class,
            &mut plan_rng,
        )?;
        let mut sums = (0.0, 0.0, 0.0);
        for indices in &batches {
            let images = train.batch(indices)?;
            let labels = train.batch_labels(indices)?;
            let mut tape = Tape::new();
            let out = match model.training_step(&mut tape, &images, &labels, &mut mix_rng) {
                Ok(out) => out,
                Err(ModelError::Augmenter(AugmenterError::NonFinite { .. })) => {
                    return Err(TrainError::Diverged { epoch });
                }
                Err(e) => return Err(e.into()),
            };
            let l_total = out.loss.l_total.item()?;
            if !l_total.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            sums.0 += out.loss.l_reg.item()?;
            sums.1 += out.loss.l_ada.item()?;
            sums.2 += l_total;
            virtual_features += out.virtual_count;
            refiner_calls += out.refiner_calls;
            pairs_mined += out.pairs_mined;

            params.zero_grads();
            tape.backward(&out.loss.l_total)?;
            sgd_step(&params, &mut optim, lr)?;
        }
        let count = batches.len() as f64;
        let (accuracy, _) = eval_accuracy(&model, test, cfg.eval_chunk)?;
        let row = EpochRow {
            epoch,
            lr,
            l_reg: sums.0 / count,
            l_ada: sums.1 / count,
            l_total: sums.2 / count,
            test_accuracy: accuracy,
        };
        writeln!(log, "{}", row.csv_line()).map_err(io_err(&metrics_path))?;
        log.flush().map_err(io_err(&metrics_path))?;
        epoch_rows.push(row);
    }

    let checkpoint_dir = out_dir.join("checkpoint");
    let meta = CheckpointMeta {
        model: model.config().clone(),
        image_size: train.image_size(),
        class_names: train.class_names.clone(),
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    save_checkpoint(&checkpoint_dir, &params, &optim, &meta)?;
    let reloaded = load_checkpoint(&checkpoint_dir)?;
    let (final_accuracy, final_per_class_recall) =
        eval_accuracy(&reloaded.model, test, cfg.eval_chunk)?;

    Ok(FitReport {
        final_accuracy,
        final_per_class_recall,
        epoch_rows,
        metrics_path,
        checkpoint_dir,
        virtual_features,
        refiner_calls,
        pairs_mined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthSpec};
    use tempfile::TempDir;

    #[test]
    fn warmup_ends_where_the_cosine_starts() {
        let cfg = TrainConfig::default();
        assert!((lr_at(14, &cfg) - 0.01).abs() < 1e-15);
        assert!((lr_at(15, &cfg) - 0.01).abs() < 1e-15);
        // Quarter period past warmup sits at half the base rate.
        assert!((lr_at(175, &cfg) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramps_linearly_from_the_first_epoch() {
        let cfg = TrainConfig::default();
        assert!((lr_at(0, &cfg) - 0.01 / 15.0).abs() < 1e-15);
        for epoch in 0..14 {
            assert!(lr_at(epoch, &cfg) < lr_at(epoch + 1, &cfg));
        }
    }

    #[test]
    fn decay_is_monotone_over_the_run() {
        let cfg = TrainConfig::default();
        for epoch in 15..cfg.epochs {
            assert!(lr_at(epoch + 1, &cfg) <= lr_at(epoch, &cfg));
        }
        assert!(lr_at(cfg.epochs - 1, &cfg) > 0.0);
    }

    #[test]
    fn config_validation_rejects_degenerate_schedules() {
        let base = TrainConfig::default;
        let cfg = TrainConfig { epochs: 0, ..base() };
        assert!(matches!(cfg.validate(), Err(TrainError::NoEpochs)));
        let cfg = TrainConfig {
            epochs: 10,
            warmup_epochs: 10,
            ..base()
        };
        assert!(matches!(
            cfg.validate(),
            Err(TrainError::WarmupTooLong {
                warmup: 10,
                epochs: 10
            })
        ));
        let cfg = TrainConfig {
            cosine_period: 0,
            ..base()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::ZeroCosinePeriod)));
        assert!(base().validate().is_ok());
    }

    #[test]
    fn csv_line_uses_plain_display_formatting() {
        let row = EpochRow {
            epoch: 3,
            lr: 0.005,
            l_reg: 1.25,
            l_ada: 0.5,
            l_total: 1.65,
            test_accuracy: 0.875,
        };
        assert_eq!(row.csv_line(), "3,0.005,1.25,0.5,1.65,0.875");
    }

    fn tiny_data(dir: &Path, seed: u64) -> (Dataset, Dataset) {
        let spec = SynthSpec {
            classes: 2,
            train_per_class: 4,
            test_per_class: 2,
            image_size: 16,
            seed,
        };
        generate(dir, &spec).unwrap();
        let train = Dataset::load(dir, "train", 16).unwrap();
        let test = Dataset::load(dir, "test", 16).unwrap();
        (train, test)
    }

    fn smoke_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            cosine_period: 4,
            batch_classes: 2,
            batch_per_class: 2,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn smoke_run_trains_logs_and_checkpoints() {
        let tmp = TempDir::new().unwrap();
        let (train, test) = tiny_data(&tmp.path().join("data"), 5);
        let out = tmp.path().join("run");
        let report = fit(&train, &test, &smoke_config(5), &out).unwrap();
        assert_eq!(report.epoch_rows.len(), 2);
        for row in &report.epoch_rows {
            assert!(row.l_total.is_finite());
            assert!((0.0..=1.0).contains(&row.test_accuracy));
        }
        assert!(report.final_accuracy >= 0.0);
        assert!(report.virtual_features > 0);
        assert!(report.refiner_calls > 0);
        assert!(report.pairs_mined > 0);
        let text = fs::read_to_string(&report.metrics_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(report.checkpoint_dir.join("manifest.txt").is_file());
    }

    #[test]
    fn baseline_flags_keep_all_counters_at_zero() {
        let tmp = TempDir::new().unwrap();
        let (train, test) = tiny_data(&tmp.path().join("data"), 6);
        let mut cfg = smoke_config(6);
        cfg.efa = false;
        cfg.ada = false;
        cfg.dhfr = false;
        let report = fit(&train, &test, &cfg, &tmp.path().join("run")).unwrap();
        assert_eq!(report.virtual_features, 0);
        assert_eq!(report.refiner_calls, 0);
        assert_eq!(report.pairs_mined, 0);
    }

    #[test]
    fn same_seed_reruns_write_identical_logs() {
        let tmp = TempDir::new().unwrap();
        let (train, test) = tiny_data(&tmp.path().join("data"), 7);
        let a = fit(&train, &test, &smoke_config(7), &tmp.path().join("a")).unwrap();
        let b = fit(&train, &test, &smoke_config(7), &tmp.path().join("b")).unwrap();
        let ta = fs::read_to_string(&a.metrics_path).unwrap();
        let tb = fs::read_to_string(&b.metrics_path).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.final_accuracy, b.final_accuracy);
        assert_eq!(a.virtual_features, b.virtual_features);
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let tmp = TempDir::new().unwrap();
        let (train, _) = tiny_data(&tmp.path().join("two"), 8);
        let spec = SynthSpec {
            classes: 3,
            train_per_class: 4,
            test_per_class: 2,
            image_size: 16,
            seed: 8,
        };
        generate(tmp.path().join("three"), &spec).unwrap();
        let test = Dataset::load(tmp.path().join("three"), "test", 16).unwrap();
        assert!(matches!(
            fit(&train, &test, &smoke_config(8), &tmp.path().join("run")),
            Err(TrainError::ClassMismatch { train: 2, test: 3 })
        ));
    }
}
