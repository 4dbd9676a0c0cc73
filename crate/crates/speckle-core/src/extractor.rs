//! Feature extraction: a compact three-stage CNN that turns `N x 1 x S x S`
//! images into feature maps and pooled, L2-normalized embeddings.

use rand::Rng;
use thiserror::Error;

use crate::blocks::{BlockError, ConvBnRelu2d};
use crate::params::ParamSet;
use crate::tensor::{shape_string, Mode, Tape, Tensor, TensorError};

pub const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];
pub const MIN_IMAGE_SIZE: usize = 16;

#[derive(Debug, Error)]
pub enum ExtractorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error("extractor: expected N x 1 x S x S input with S >= {min}, got {shape}")]
    BadInput { shape: String, min: usize },
    #[error("extractor: {images} images but {labels} labels and {ids} ids")]
    LabelCount {
        images: usize,
        labels: usize,
        ids: usize,
    },
}

/// Feature maps plus pooled embeddings for one batch, with the labels and
/// sample ids carried alongside.
pub struct FeatureBatch {
    /// `N x C x h x w` feature maps.
    pub maps: Tensor,
    /// `N x C` pooled, L2-normalized embeddings.
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

/// Anything that can turn an image batch into a [`FeatureBatch`]. The crate
/// ships one implementation, [`SmallCnn`]; swapping in a different backbone
/// only needs this trait.
pub trait FeatureExtractor {
    fn extract(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        labels: &[usize],
        ids: &[String],
        mode: Mode,
    ) -> Result<FeatureBatch, ExtractorError>;

    /// Channel count of the produced feature maps.
    fn out_channels(&self) -> usize;
}

/// Three stride-2 conv+BN+ReLU stages (1 -> 16 -> 32 -> 64 channels), each
/// halving the spatial size.
pub struct SmallCnn {
    stages: Vec<ConvBnRelu2d>,
}

impl SmallCnn {
    pub fn init<R: Rng>(ps: &mut ParamSet, prefix: &str, rng: &mut R) -> Result<Self, BlockError> {
        let mut stages = Vec::new();
        let mut in_ch = 1;
        for (i, &out_ch) in STAGE_CHANNELS.iter().enumerate() {
            stages.push(ConvBnRelu2d::init(
                ps,
                &format!("{prefix}.stage{i}"),
                in_ch,
                out_ch,
                3,
                2,
                1,
                rng,
            )?);
            in_ch = out_ch;
        }
        Ok(SmallCnn { stages })
    }

    /// Runs only the conv stages, returning `N x 64 x S/8 x S/8` maps.
    pub fn feature_maps(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        mode: Mode,
    ) -> Result<Tensor, ExtractorError> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] < MIN_IMAGE_SIZE || shape[3] < MIN_IMAGE_SIZE
        {
            return Err(ExtractorError::BadInput {
                shape: shape_string(&shape),
                min: MIN_IMAGE_SIZE,
            });
        }
        let mut x = images.clone();
        for stage in &self.stages {
            x = stage.forward(tape, &x, mode)?;
        }
        Ok(x)
    }
}

/// Pools maps to one value per channel and L2-normalizes each row.
pub fn pooled_embeddings(tape: &mut Tape, maps: &Tensor) -> Result<Tensor, TensorError> {
    let shape = maps.shape();
    let pooled = tape.adaptive_avg_pool2d(maps, (1, 1))?;
    let flat = tape.reshape(&pooled, vec![shape[0], shape[1]])?;
    tape.l2_normalize(&flat, 1)
}

/// Flattens full maps to one long row per sample and L2-normalizes, an
/// alternative embedding used when similarity should see spatial layout.
pub fn flattened_embeddings(tape: &mut Tape, maps: &Tensor) -> Result<Tensor, TensorError> {
    let shape = maps.shape();
    let cols: usize = shape[1..].iter().product();
    let flat = tape.reshape(maps, vec![shape[0], cols])?;
    tape.l2_normalize(&flat, 1)
}

impl FeatureExtractor for SmallCnn {
    fn extract(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        labels: &[usize],
        ids: &[String],
        mode: Mode,
    ) -> Result<FeatureBatch, ExtractorError> {
        let n = images.shape()[0];
        if labels.len() != n || ids.len() != n {
            return Err(ExtractorError::LabelCount {
                images: n,
                labels: labels.len(),
                ids: ids.len(),
            });
        }
        let maps = self.feature_maps(tape, images, mode)?;
        let embeddings = pooled_embeddings(tape, &maps)?;
        Ok(FeatureBatch {
            maps,
            embeddings,
            labels: labels.to_vec(),
            ids: ids.to_vec(),
        })
    }

    fn out_channels(&self) -> usize {
        *STAGE_CHANNELS.last().expect("stages are fixed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::grad_check;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed | 1;
        (0..n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 1000) as f64 / 1000.0
            })
            .collect()
    }

    #[test]
    fn shapes_follow_the_stage_contract() {
        let mut rng = seeded(11);
        let mut ps = ParamSet::new();
        let cnn = SmallCnn::init(&mut ps, "ext", &mut rng).unwrap();
        let images = Tensor::new(vec![3, 1, 32, 32], pseudo_random(3 * 32 * 32, 1)).unwrap();
        let mut tape = Tape::new();
        let batch = cnn
            .extract(&mut tape, &images, &[0, 1, 0], &ids(3), Mode::Train)
            .unwrap();
        assert_eq!(batch.maps.shape(), vec![3, 64, 4, 4]);
        assert_eq!(batch.embeddings.shape(), vec![3, 64]);
    }

    #[test]
    fn embeddings_have_unit_norm() {
        let mut rng = seeded(12);
        let mut ps = ParamSet::new();
        let cnn = SmallCnn::init(&mut ps, "ext", &mut rng).unwrap();
        let images = Tensor::new(vec![2, 1, 16, 16], pseudo_random(2 * 256, 2)).unwrap();
        let mut tape = Tape::new();
        let batch = cnn
            .extract(&mut tape, &images, &[0, 1], &ids(2), Mode::Train)
            .unwrap();
        let e = batch.embeddings.value();
        for n in 0..2 {
            let norm: f64 = e[n * 64..(n + 1) * 64]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "row {n} norm {norm}");
        }
    }

    #[test]
    fn duplicate_images_produce_identical_rows() {
        let mut rng = seeded(13);
        let mut ps = ParamSet::new();
        let cnn = SmallCnn::init(&mut ps, "ext", &mut rng).unwrap();
        let one = pseudo_random(256, 3);
        let mut both = one.clone();
        both.extend_from_slice(&one);
        let images = Tensor::new(vec![2, 1, 16, 16], both).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let batch = cnn
                .extract(&mut tape, &images, &[0, 0], &ids(2), mode)
                .unwrap();
            let e = batch.embeddings.value();
            assert_eq!(&e[..64], &e[64..], "mode {mode:?}");
        }
    }

    #[test]
    fn rejects_small_or_multichannel_input() {
        let mut rng = seeded(14);
        let mut ps = ParamSet::new();
        let cnn = SmallCnn::init(&mut ps, "ext", &mut rng).unwrap();
        let mut tape = Tape::new();
        let small = Tensor::zeros(vec![1, 1, 8, 8]);
        assert!(matches!(
            cnn.extract(&mut tape, &small, &[0], &ids(1), Mode::Eval),
            Err(ExtractorError::BadInput { .. })
        ));
        let multi = Tensor::zeros(vec![1, 3, 32, 32]);
        assert!(cnn
            .extract(&mut tape, &multi, &[0], &ids(1), Mode::Eval)
            .is_err());
    }

    #[test]
    fn extract_gradient_passes_grad_check() {
        let mut rng = seeded(15);
        let mut ps = ParamSet::new();
        let cnn = SmallCnn::init(&mut ps, "ext", &mut rng).unwrap();
        let images = Tensor::new(vec![2, 1, 16, 16], pseudo_random(512, 5)).unwrap();
        let weights = Tensor::new(vec![2, 64], pseudo_random(128, 7)).unwrap();
        let report = grad_check(
            |tape, x| {
                let maps = cnn.feature_maps(tape, x, Mode::Train)?;
                let emb = pooled_embeddings(tape, &maps)?;
                let w = tape.hadamard(&emb, &weights)?;
                Ok::<_, ExtractorError>(tape.sum(&w, &[0, 1])?)
            },
            &images,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
