//! Run configuration: one strict TOML file mirroring the training options
//! plus dataset and output paths. Unknown keys are rejected, missing keys
//! fall back to the documented defaults, and the resolved file is echoed
//! next to the run outputs so any run can be reproduced from its artifacts.

use serde::{Deserialize, Serialize};
use speckle_core::trainer::TrainConfig;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("--set {arg}: {message}")]
    Override { arg: String, message: String },
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot render config: {message}")]
    Render { path: PathBuf, message: String },
}

impl ConfigError {
    /// Bad file contents or overrides are usage errors; filesystem trouble
    /// is an I/O error.
    pub fn is_usage(&self) -> bool {
        matches!(self, ConfigError::Parse { .. } | ConfigError::Override { .. })
    }
}

/// Everything a run needs beyond its dataset: paths plus training options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset root holding `train/` and `test/` split directories.
    pub data: PathBuf,
    /// Output directory for the resolved config, logs, and checkpoint.
    pub out: PathBuf,
    pub image_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub cosine_period: usize,
    pub batch_classes: usize,
    pub batch_per_class: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub rho: f64,
    pub seed: u64,
    pub efa: bool,
    pub ada: bool,
    pub dhfr: bool,
    pub flat_similarity: bool,
    pub eval_chunk: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            data: PathBuf::from("data"),
            out: PathBuf::from("runs/latest"),
            image_size: 32,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            cosine_period: t.cosine_period,
            batch_classes: t.batch_classes,
            batch_per_class: t.batch_per_class,
            base_lr: t.base_lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            rho: t.rho,
            seed: t.seed,
            efa: t.efa,
            ada: t.ada,
            dhfr: t.dhfr,
            flat_similarity: t.flat_similarity,
            eval_chunk: t.eval_chunk,
        }
    }
}

impl RunConfig {
    /// Reads the file and applies `--set key=value` overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.message().to_string(),
        })?;
        for arg in overrides {
            cfg.apply_override(arg)?;
        }
        Ok(cfg)
    }

    /// The training-side view of this config.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            cosine_period: self.cosine_period,
            batch_classes: self.batch_classes,
            batch_per_class: self.batch_per_class,
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            rho: self.rho,
            seed: self.seed,
            efa: self.efa,
            ada: self.ada,
            dhfr: self.dhfr,
            flat_similarity: self.flat_similarity,
            eval_chunk: self.eval_chunk,
        }
    }

    /// Writes the fully resolved config; feeding the echo back in
    /// reproduces the run.
    pub fn echo(&self, path: &Path) -> Result<(), ConfigError> {
        let text = toml::to_string(self).map_err(|e| ConfigError::Render {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        fs::write(path, text).map_err(|source| ConfigError::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    fn apply_override(&mut self, arg: &str) -> Result<(), ConfigError> {
        let Some((key, value)) = arg.split_once('=') else {
            return Err(ConfigError::Override {
                arg: arg.to_string(),
                message: "expected key=value".to_string(),
            });
        };
        match key {
            "data" => self.data = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "image_size" => self.image_size = parse(arg, value)?,
            "epochs" => self.epochs = parse(arg, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(arg, value)?,
            "cosine_period" => self.cosine_period = parse(arg, value)?,
            "batch_classes" => self.batch_classes = parse(arg, value)?,
            "batch_per_class" => self.batch_per_class = parse(arg, value)?,
            "base_lr" => self.base_lr = parse(arg, value)?,
            "momentum" => self.momentum = parse(arg, value)?,
            "weight_decay" => self.weight_decay = parse(arg, value)?,
            "lambda1" => self.lambda1 = parse(arg, value)?,
            "lambda2" => self.lambda2 = parse(arg, value)?,
            "rho" => self.rho = parse(arg, value)?,
            "seed" => self.seed = parse(arg, value)?,
            "efa" => self.efa = parse(arg, value)?,
            "ada" => self.ada = parse(arg, value)?,
            "dhfr" => self.dhfr = parse(arg, value)?,
            "flat_similarity" => self.flat_similarity = parse(arg, value)?,
            "eval_chunk" => self.eval_chunk = parse(arg, value)?,
            _ => {
                return Err(ConfigError::Override {
                    arg: arg.to_string(),
                    message: format!("unknown key {key}"),
                })
            }
        }
        Ok(())
    }
}

fn parse<T>(arg: &str, value: &str) -> Result<T, ConfigError>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| ConfigError::Override {
        arg: arg.to_string(),
        message: format!("{e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_the_documented_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train_config(), TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = toml::from_str::<RunConfig>("epochz = 3").unwrap_err();
        assert!(err.to_string().contains("epochz"));
    }

    #[test]
    fn overrides_replace_values_in_order() {
        let mut cfg = RunConfig::default();
        for arg in ["epochs=3", "base_lr=0.5", "efa=false", "data=elsewhere"] {
            cfg.apply_override(arg).unwrap();
        }
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.base_lr, 0.5);
        assert!(!cfg.efa);
        assert_eq!(cfg.data, PathBuf::from("elsewhere"));
    }

    #[test]
    fn bad_overrides_name_the_problem() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_override("epochs=soon").unwrap_err();
        assert!(err.is_usage() && err.to_string().contains("epochs=soon"));
        let err = cfg.apply_override("nope=1").unwrap_err();
        assert!(err.to_string().contains("unknown key nope"));
        let err = cfg.apply_override("epochs").unwrap_err();
        assert!(err.to_string().contains("expected key=value"));
    }

    #[test]
    fn echo_round_trips_exactly() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_override("lambda2=0.25").unwrap();
        cfg.apply_override("seed=9").unwrap();
        let path = tmp.path().join("config.toml");
        cfg.echo(&path).unwrap();
        let back = RunConfig::load(&path, &[]).unwrap();
        assert_eq!(back, cfg);
    }
}
