//! Datasets on disk and in memory.
//!
//! A dataset root holds `train/` and `test/` splits, each a directory per
//! class containing tensor files. Class labels come from the lexicographic
//! order of the class directory names, and files load in lexicographic
//! order within each class. Images resize to the configured side length on
//! load, so the in-memory dataset is always square and uniform.

pub mod resize;
pub mod sampler;
pub mod synth;
pub mod tns;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};
use resize::resize_bilinear;
use tns::TnsError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    Tns {
        path: PathBuf,
        #[source]
        source: TnsError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("split directory {0} does not exist")]
    MissingSplit(PathBuf),
    #[error("split {0} contains no class directories")]
    NoClasses(PathBuf),
    #[error("class {0} contains no tensor files")]
    EmptyClass(String),
    #[error("{path}: expected a rank-2 image, got rank {rank}")]
    NotAnImage { path: PathBuf, rank: usize },
    #[error("sample index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
}

/// An in-memory split: one flat list of square images with labels.
pub struct Dataset {
    pub class_names: Vec<String>,
    pub labels: Vec<usize>,
    images: Vec<Vec<f64>>,
    image_size: usize,
}

impl Dataset {
    /// Loads `root/<split>`, resizing every image to `image_size` square.
    pub fn load<P: AsRef<Path>>(
        root: P,
        split: &str,
        image_size: usize,
    ) -> Result<Self, DataError> {
        let split_dir = root.as_ref().join(split);
        if !split_dir.is_dir() {
            return Err(DataError::MissingSplit(split_dir));
        }
        let mut class_dirs: Vec<PathBuf> = fs::read_dir(&split_dir)?
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        if class_dirs.is_empty() {
            return Err(DataError::NoClasses(split_dir));
        }
        let mut class_names = Vec::with_capacity(class_dirs.len());
        let mut labels = Vec::new();
        let mut images = Vec::new();
        for (label, dir) in class_dirs.iter().enumerate() {
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mut files: Vec<PathBuf> = fs::read_dir(dir)?
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|e| e == "tns"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(DataError::EmptyClass(name));
            }
            for file in files {
                let (shape, data) = tns::read_tns(&file).map_err(|source| DataError::Tns {
                    path: file.clone(),
                    source,
                })?;
                if shape.len() != 2 {
                    return Err(DataError::NotAnImage {
                        path: file,
                        rank: shape.len(),
                    });
                }
                images.push(resize_bilinear(
                    &data, shape[0], shape[1], image_size, image_size,
                ));
                labels.push(label);
            }
            class_names.push(name);
        }
        Ok(Dataset {
            class_names,
            labels,
            images,
            image_size,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes()];
        for &label in &self.labels {
            counts[label] += 1;
        }
        counts
    }

    /// Stacks the chosen samples into an `N x 1 x S x S` batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor, DataError> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * s * s);
        for &index in indices {
            let image = self
                .images
                .get(index)
                .ok_or(DataError::IndexOutOfRange {
                    index,
                    len: self.len(),
                })?;
            data.extend_from_slice(image);
        }
        Ok(Tensor::new(vec![indices.len(), 1, s, s], data)?)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Result<Vec<usize>, DataError> {
        indices
            .iter()
            .map(|&index| {
                self.labels
                    .get(index)
                    .copied()
                    .ok_or(DataError::IndexOutOfRange {
                        index,
                        len: self.len(),
                    })
            })
            .collect()
    }
}
