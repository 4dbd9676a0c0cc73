//! Checkpoints: a manifest text file describing the model configuration
//! and every stored tensor, next to one `.tns` file per parameter and per
//! optimizer velocity buffer.
//!
//! Values pass through the 32-bit tensor files, so a load reproduces the
//! saved model up to `f32` width and a second save is byte-identical.
//! Loading rebuilds the model from the manifest configuration and then
//! overwrites every parameter, reporting missing, unknown, or reshaped
//! entries by parameter name.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::tns::{read_tns, write_tns, TnsError};
use crate::model::{ModelConfig, ModelError, RecognitionModel};
use crate::params::{ParamError, ParamKind, ParamSet};
use crate::rng::seeded;
use crate::tensor::{shape_string, TensorError};

use super::optim::OptimState;

const MANIFEST_NAME: &str = "manifest.txt";
const FORMAT_TAG: &str = "speckle-checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Tns {
        path: PathBuf,
        #[source]
        source: TnsError,
    },
    #[error("{path}:{line}: {what}")]
    Manifest {
        path: PathBuf,
        line: usize,
        what: String,
    },
    #[error("checkpoint lacks parameter {name:?} required by the architecture")]
    MissingParam { name: String },
    #[error("checkpoint stores parameter {name:?} unknown to the architecture")]
    UnknownParam { name: String },
    #[error("parameter {name:?} is stored as {found} but the architecture needs {expected}")]
    ShapeMismatch {
        name: String,
        expected: String,
        found: String,
    },
    #[error("velocity buffer for {name:?} has {actual} values, parameter has {expected}")]
    VelocityLength {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Everything besides tensors needed to rebuild and evaluate the model.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Square image side the model was trained on.
    pub image_size: usize,
    pub class_names: Vec<String>,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// A checkpoint restored from disk, ready to evaluate or keep training.
pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
    pub model: RecognitionModel,
    pub optim: OptimState,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn tns_err(path: &Path) -> impl FnOnce(TnsError) -> CheckpointError + '_ {
    move |source| CheckpointError::Tns {
        path: path.to_path_buf(),
        source,
    }
}

fn kind_tag(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Trainable => "trainable",
        ParamKind::State => "state",
    }
}

/// Writes the manifest and one `.tns` file per parameter and velocity
/// buffer under `dir`, creating the directory tree as needed.
pub fn save_checkpoint(
    dir: &Path,
    params: &ParamSet,
    optim: &OptimState,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let param_dir = dir.join("params");
    let velocity_dir = dir.join("velocity");
    fs::create_dir_all(&param_dir).map_err(io_err(&param_dir))?;
    fs::create_dir_all(&velocity_dir).map_err(io_err(&velocity_dir))?;

    let mut manifest = String::new();
    let m = &meta.model;
    let _ = writeln!(manifest, "format: {FORMAT_TAG}");
    let _ = writeln!(manifest, "classes: {}", m.classes);
    let _ = writeln!(manifest, "image_size: {}", meta.image_size);
    let _ = writeln!(manifest, "use_augmenter: {}", m.use_augmenter);
    let _ = writeln!(manifest, "use_adaptive: {}", m.use_adaptive);
    let _ = writeln!(manifest, "use_refiner: {}", m.use_refiner);
    let _ = writeln!(manifest, "lambda1: {}", m.lambda1);
    let _ = writeln!(manifest, "lambda2: {}", m.lambda2);
    let _ = writeln!(manifest, "rho: {}", m.rho);
    let _ = writeln!(manifest, "flat_similarity: {}", m.flat_similarity);
    let _ = writeln!(manifest, "momentum: {}", meta.momentum);
    let _ = writeln!(manifest, "weight_decay: {}", meta.weight_decay);
    let _ = writeln!(manifest, "class_names: {}", meta.class_names.join(","));
    for (name, entry) in params.iter() {
        let _ = writeln!(
            manifest,
            "param {name} {} {}",
            shape_string(&entry.tensor.shape()),
            kind_tag(entry.kind)
        );
    }
    for (name, buffer) in optim.iter() {
        let _ = writeln!(manifest, "velocity {name} {}", buffer.len());
    }
    let manifest_path = dir.join(MANIFEST_NAME);
    fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;

    for (name, entry) in params.iter() {
        let path = param_dir.join(format!("{name}.tns"));
        write_tns(&path, &entry.tensor.shape(), &entry.tensor.value()).map_err(tns_err(&path))?;
    }
    for (name, buffer) in optim.iter() {
        let path = velocity_dir.join(format!("{name}.tns"));
        write_tns(&path, &[buffer.len()], buffer).map_err(tns_err(&path))?;
    }
    Ok(())
}

struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
    line: usize,
}

struct VelocityRecord {
    name: String,
    len: usize,
}

struct Manifest {
    meta: CheckpointMeta,
    params: Vec<ParamRecord>,
    velocities: Vec<VelocityRecord>,
}

fn manifest_err(path: &Path, line: usize, what: impl Into<String>) -> CheckpointError {
    CheckpointError::Manifest {
        path: path.to_path_buf(),
        line,
        what: what.into(),
    }
}

fn parse_shape(text: &str) -> Option<Vec<usize>> {
    text.split('x').map(|d| d.parse().ok()).collect()
}

fn parse_manifest(path: &Path) -> Result<Manifest, CheckpointError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut keys: Vec<(usize, String, String)> = Vec::new();
    let mut params = Vec::new();
    let mut velocities = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw.trim_end();
        if row.is_empty() {
            continue;
        }
        if let Some(rest) = row.strip_prefix("param ") {
            let fields: Vec<&str> = rest.split(' ').collect();
            let [name, shape, kind] = fields[..] else {
                return Err(manifest_err(path, line, "param record needs name, shape, kind"));
            };
            let shape = parse_shape(shape)
                .ok_or_else(|| manifest_err(path, line, format!("bad shape {shape:?}")))?;
            let kind = match kind {
                "trainable" => ParamKind::Trainable,
                "state" => ParamKind::State,
                other => {
                    return Err(manifest_err(path, line, format!("bad kind {other:?}")));
                }
            };
            params.push(ParamRecord {
                name: name.to_string(),
                shape,
                kind,
                line,
            });
        } else if let Some(rest) = row.strip_prefix("velocity ") {
            let fields: Vec<&str> = rest.split(' ').collect();
            let [name, len] = fields[..] else {
                return Err(manifest_err(path, line, "velocity record needs name, length"));
            };
            let len = len
                .parse()
                .map_err(|_| manifest_err(path, line, format!("bad length {len:?}")))?;
            velocities.push(VelocityRecord {
                name: name.to_string(),
                len,
            });
        } else if let Some((key, value)) = row.split_once(": ") {
            if keys.iter().any(|(_, k, _)| k == key) {
                return Err(manifest_err(path, line, format!("duplicate key {key:?}")));
            }
            keys.push((line, key.to_string(), value.to_string()));
        } else {
            return Err(manifest_err(path, line, format!("unparseable line {row:?}")));
        }
    }

    let mut take = |key: &str| -> Result<(usize, String), CheckpointError> {
        let pos = keys
            .iter()
            .position(|(_, k, _)| k == key)
            .ok_or_else(|| manifest_err(path, 0, format!("missing key {key:?}")))?;
        let (line, _, value) = keys.remove(pos);
        Ok((line, value))
    };
    let (line, format) = take("format")?;
    if format != FORMAT_TAG {
        return Err(manifest_err(
            path,
            line,
            format!("format {format:?} is not {FORMAT_TAG:?}"),
        ));
    }
    macro_rules! parsed {
        ($key:literal, $ty:ty) => {{
            let (line, value) = take($key)?;
            value.parse::<$ty>().map_err(|_| {
                manifest_err(path, line, format!("bad {} value {value:?}", $key))
            })?
        }};
    }
    let classes = parsed!("classes", usize);
    let image_size = parsed!("image_size", usize);
    let use_augmenter = parsed!("use_augmenter", bool);
    let use_adaptive = parsed!("use_adaptive", bool);
    let use_refiner = parsed!("use_refiner", bool);
    let lambda1 = parsed!("lambda1", f64);
    let lambda2 = parsed!("lambda2", f64);
    let rho = parsed!("rho", f64);
    let flat_similarity = parsed!("flat_similarity", bool);
    let momentum = parsed!("momentum", f64);
    let weight_decay = parsed!("weight_decay", f64);
    let (names_line, names) = take("class_names")?;
    let class_names: Vec<String> = names.split(',').map(str::to_string).collect();
    if class_names.len() != classes {
        return Err(manifest_err(
            path,
            names_line,
            format!("{} class names for {classes} classes", class_names.len()),
        ));
    }
    if let Some((line, key, _)) = keys.first() {
        return Err(manifest_err(path, *line, format!("unknown key {key:?}")));
    }
    Ok(Manifest {
        meta: CheckpointMeta {
            model: ModelConfig {
                classes,
                use_augmenter,
                use_adaptive,
                use_refiner,
                lambda1,
                lambda2,
                rho,
                flat_similarity,
            },
            image_size,
            class_names,
            momentum,
            weight_decay,
        },
        params,
        velocities,
    })
}

/// Rebuilds the model described by the manifest and fills every parameter
/// and velocity buffer from the stored tensors.
pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let manifest = parse_manifest(&manifest_path)?;

    let mut params = ParamSet::new();
    // Initial values are placeholders; every tensor is overwritten below.
    let mut rng = seeded(0);
    let model = RecognitionModel::init(&mut params, manifest.meta.model.clone(), &mut rng)?;

    for record in &manifest.params {
        if !params.contains(&record.name) {
            return Err(CheckpointError::UnknownParam {
                name: record.name.clone(),
            });
        }
        let entry = params.get(&record.name)?;
        let expected = entry.tensor.shape();
        if record.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: record.name.clone(),
                expected: shape_string(&expected),
                found: shape_string(&record.shape),
            });
        }
        if record.kind != entry.kind {
            return Err(manifest_err(
                &manifest_path,
                record.line,
                format!(
                    "parameter {:?} recorded as {}, expected {}",
                    record.name,
                    kind_tag(record.kind),
                    kind_tag(entry.kind)
                ),
            ));
        }
    }
    for (name, _) in params.iter() {
        if !manifest.params.iter().any(|r| r.name == name) {
            return Err(CheckpointError::MissingParam {
                name: name.to_string(),
            });
        }
    }

    for record in &manifest.params {
        let path = dir.join("params").join(format!("{}.tns", record.name));
        let (shape, data) = read_tns(&path).map_err(tns_err(&path))?;
        if shape != record.shape {
            return Err(CheckpointError::ShapeMismatch {
                name: record.name.clone(),
                expected: shape_string(&record.shape),
                found: shape_string(&shape),
            });
        }
        params.get(&record.name)?.tensor.set_data(&data)?;
    }

    let mut optim = OptimState::new(manifest.meta.momentum, manifest.meta.weight_decay);
    for record in &manifest.velocities {
        if !params.contains(&record.name) {
            return Err(CheckpointError::UnknownParam {
                name: record.name.clone(),
            });
        }
        let expected = params.get(&record.name)?.tensor.numel();
        if record.len != expected {
            return Err(CheckpointError::VelocityLength {
                name: record.name.clone(),
                expected,
                actual: record.len,
            });
        }
        let path = dir.join("velocity").join(format!("{}.tns", record.name));
        let (shape, data) = read_tns(&path).map_err(tns_err(&path))?;
        if shape != vec![record.len] {
            return Err(CheckpointError::VelocityLength {
                name: record.name.clone(),
                expected: record.len,
                actual: data.len(),
            });
        }
        optim.set_velocity(&record.name, data);
    }

    Ok(LoadedCheckpoint {
        meta: manifest.meta,
        params,
        model,
        optim,
    })
}
