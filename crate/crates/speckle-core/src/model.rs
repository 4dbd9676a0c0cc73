//! The full recognition model.
//!
//! Composes the convolutional extractor, the in-network feature augmenter,
//! the dynamic refiner, and the linear softmax classifier. Each stage can
//! be switched off independently, which is how the ablation grid is built:
//! with everything off a training step is a plain cross-entropy step over
//! the extractor and classifier. Virtual features synthesized for a batch
//! are concatenated with the real maps and pass through the refiner and
//! classifier as one batch, so normalization statistics see both.

use rand::Rng;
use thiserror::Error;

use crate::augmenter::{
    self, AugmenterError, LossBreakdown, PairAssignment, VirtualSet,
};
use crate::blocks::{BlockError, LinearClassifier};
use crate::data::{DataError, Dataset};
use crate::extractor::{
    flattened_embeddings, pooled_embeddings, ExtractorError, SmallCnn, STAGE_CHANNELS,
};
use crate::params::ParamSet;
use crate::refiner::{FeatureRefiner, RefinerError};
use crate::tensor::{Mode, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
    #[error(transparent)]
    Refiner(#[from] RefinerError),
    #[error(transparent)]
    Augmenter(#[from] AugmenterError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("batch has {images} images but {labels} labels")]
    LabelCount { images: usize, labels: usize },
    #[error("model needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
}

/// Which stages run and how the loss terms are weighted.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    /// Synthesize virtual features and add the mixed-label loss term.
    pub use_augmenter: bool,
    /// Add the adaptive hinge on hard-pair similarities.
    pub use_adaptive: bool,
    /// Refine feature maps before classification.
    pub use_refiner: bool,
    /// Weight of the recognition loss.
    pub lambda1: f64,
    /// Weight of the adaptive loss.
    pub lambda2: f64,
    /// Exponent of the margin intensity.
    pub rho: f64,
    /// Mine pairs on flattened maps instead of pooled embeddings.
    pub flat_similarity: bool,
}

impl ModelConfig {
    /// Everything enabled with the default weights.
    pub fn full(classes: usize) -> Self {
        ModelConfig {
            classes,
            use_augmenter: true,
            use_adaptive: true,
            use_refiner: true,
            lambda1: 1.0,
            lambda2: 0.8,
            rho: 1.0,
            flat_similarity: false,
        }
    }

    /// Plain extractor and classifier only.
    pub fn baseline(classes: usize) -> Self {
        ModelConfig {
            use_augmenter: false,
            use_adaptive: false,
            use_refiner: false,
            ..Self::full(classes)
        }
    }
}

/// Everything a training step produces besides parameter gradients.
pub struct StepOutcome {
    pub loss: LossBreakdown,
    /// Argmax prediction per real sample.
    pub predictions: Vec<usize>,
    /// Probability rows of the real samples, `N x classes`.
    pub real_probs: Tensor,
    /// How many anchors were mined for pairs (0 when mining was off).
    pub pairs_mined: usize,
    /// How many virtual features were synthesized.
    pub virtual_count: usize,
    /// How many refiner passes ran (0 or 1).
    pub refiner_calls: usize,
}

pub struct RecognitionModel {
    extractor: SmallCnn,
    refiner: Option<FeatureRefiner>,
    classifier: LinearClassifier,
    config: ModelConfig,
}

impl RecognitionModel {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        config: ModelConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if config.classes < 2 {
            return Err(ModelError::TooFewClasses(config.classes));
        }
        let extractor = SmallCnn::init(ps, "extractor", rng)?;
        let channels = *STAGE_CHANNELS.last().expect("stage list is non-empty");
        let refiner = if config.use_refiner {
            Some(FeatureRefiner::init(ps, "refiner", channels, rng)?)
        } else {
            None
        };
        let classifier = LinearClassifier::init(ps, "classifier", channels, config.classes, rng)?;
        Ok(RecognitionModel {
            extractor,
            refiner,
            classifier,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn argmax_rows(probs: &Tensor) -> Vec<usize> {
        let shape = probs.shape();
        let (n, k) = (shape[0], shape[1]);
        let v = probs.value();
        (0..n)
            .map(|i| {
                let row = &v[i * k..(i + 1) * k];
                let mut best = 0;
                for (j, p) in row.iter().enumerate() {
                    if *p > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Runs maps through the optional refiner, pools, and classifies.
    /// Returns the probability rows.
    fn classify_maps(
        &self,
        tape: &mut Tape,
        maps: &Tensor,
        mode: Mode,
    ) -> Result<Tensor, ModelError> {
        let final_maps = match &self.refiner {
            Some(refiner) => refiner.forward(tape, maps, mode)?.refined,
            None => maps.clone(),
        };
        let shape = final_maps.shape();
        let pooled = tape.adaptive_avg_pool2d(&final_maps, (1, 1))?;
        let flat = tape.reshape(&pooled, vec![shape[0], shape[1]])?;
        let (_logits, probs) = self.classifier.classify(tape, &flat)?;
        Ok(probs)
    }

    /// One training forward pass: mixes in virtual features when enabled
    /// and assembles the weighted loss.
    pub fn training_step<R: Rng>(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        labels: &[usize],
        rng: &mut R,
    ) -> Result<StepOutcome, ModelError> {
        let n = labels.len();
        if images.shape().first() != Some(&n) {
            return Err(ModelError::LabelCount {
                images: *images.shape().first().unwrap_or(&0),
                labels: n,
            });
        }
        let maps = self.extractor.feature_maps(tape, images, Mode::Train)?;

        let adaptive_active = self.config.use_adaptive && self.config.lambda2 != 0.0;
        let need_pairs = self.config.use_augmenter || adaptive_active;
        let mut mined: Option<(Tensor, Vec<PairAssignment>)> = None;
        if need_pairs {
            let embeddings = if self.config.flat_similarity {
                flattened_embeddings(tape, &maps)?
            } else {
                pooled_embeddings(tape, &maps)?
            };
            let sim = augmenter::similarity_matrix(tape, &embeddings)?;
            let pairs = augmenter::search_pairs(&sim, labels)?;
            mined = Some((sim, pairs));
        }

        let virtuals = match (&mined, self.config.use_augmenter) {
            (Some((_, pairs)), true) => {
                augmenter::synthesize_virtual(tape, &maps, labels, pairs, rng)?
            }
            _ => VirtualSet::default(),
        };

        let all_maps = match virtuals.batched_maps(tape)? {
            Some(vmaps) => tape.concat0(&[maps.clone(), vmaps])?,
            None => maps,
        };
        let probs = self.classify_maps(tape, &all_maps, Mode::Train)?;

        let real_rows: Vec<usize> = (0..n).collect();
        let real_probs = tape.index_select0(&probs, &real_rows)?;
        let virtual_probs = if virtuals.is_empty() {
            None
        } else {
            let rows: Vec<usize> = (n..n + virtuals.len()).collect();
            Some(tape.index_select0(&probs, &rows)?)
        };

        let l_reg = augmenter::recognition_loss(
            tape,
            &real_probs,
            labels,
            virtual_probs.as_ref(),
            &virtuals,
        )?;
        let l_ada = match (&mined, adaptive_active) {
            (Some((sim, pairs)), true) => {
                let d_bm = augmenter::benchmark_distance(pairs);
                let psi = augmenter::dynamic_intensity(pairs, &d_bm, self.config.rho)?;
                augmenter::adaptive_loss(tape, sim, pairs, &psi)?
            }
            _ => Tensor::scalar(0.0),
        };
        let loss = augmenter::total_loss(
            tape,
            &l_reg,
            &l_ada,
            self.config.lambda1,
            self.config.lambda2,
            self.config.rho,
        )?;

        Ok(StepOutcome {
            predictions: Self::argmax_rows(&real_probs),
            real_probs,
            pairs_mined: mined.map_or(0, |(_, pairs)| pairs.len()),
            virtual_count: virtuals.len(),
            refiner_calls: usize::from(self.refiner.is_some()),
            loss,
        })
    }

    /// Class probabilities in evaluation mode, `N x classes`.
    pub fn eval_probabilities(&self, images: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::no_grad();
        let maps = self.extractor.feature_maps(&mut tape, images, Mode::Eval)?;
        self.classify_maps(&mut tape, &maps, Mode::Eval)
    }

    /// Argmax class per image, in evaluation mode.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>, ModelError> {
        Ok(Self::argmax_rows(&self.eval_probabilities(images)?))
    }

    /// Predicts a whole dataset in fixed-size chunks.
    pub fn predict_dataset(
        &self,
        dataset: &Dataset,
        chunk: usize,
    ) -> Result<Vec<usize>, ModelError> {
        let chunk = chunk.max(1);
        let mut preds = Vec::with_capacity(dataset.len());
        let indices: Vec<usize> = (0..dataset.len()).collect();
        for part in indices.chunks(chunk) {
            let images = dataset.batch(part)?;
            preds.extend(self.predict(&images)?);
        }
        Ok(preds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn images(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let data: Vec<f64> = (0..n * size * size)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        Tensor::new(vec![n, 1, size, size], data).unwrap()
    }

    fn build(config: ModelConfig, seed: u64) -> (ParamSet, RecognitionModel) {
        let mut ps = ParamSet::new();
        let mut rng = seeded(seed);
        let model = RecognitionModel::init(&mut ps, config, &mut rng).unwrap();
        (ps, model)
    }

    #[test]
    fn full_step_produces_finite_weighted_loss() {
        let (_ps, model) = build(ModelConfig::full(2), 1);
        let x = images(4, 16, 2);
        let labels = [0, 0, 1, 1];
        let mut tape = Tape::new();
        let mut rng = seeded(3);
        let out = model
            .training_step(&mut tape, &x, &labels, &mut rng)
            .unwrap();
        assert_eq!(out.predictions.len(), 4);
        assert_eq!(out.real_probs.shape(), vec![4, 2]);
        assert_eq!(out.pairs_mined, 4);
        assert!(out.virtual_count > 0);
        assert_eq!(out.refiner_calls, 1);
        let total = out.loss.l_total.item().unwrap();
        assert!(total.is_finite() && total > 0.0);
        let l_reg = out.loss.l_reg.item().unwrap();
        let l_ada = out.loss.l_ada.item().unwrap();
        assert!((total - (l_reg + 0.8 * l_ada)).abs() < 1e-12);
    }

    #[test]
    fn baseline_step_runs_no_optional_stage() {
        let (_ps, model) = build(ModelConfig::baseline(2), 4);
        let x = images(4, 16, 5);
        let labels = [0, 1, 0, 1];
        let mut tape = Tape::new();
        let mut rng = seeded(6);
        let out = model
            .training_step(&mut tape, &x, &labels, &mut rng)
            .unwrap();
        assert_eq!(out.pairs_mined, 0);
        assert_eq!(out.virtual_count, 0);
        assert_eq!(out.refiner_calls, 0);
        assert_eq!(out.loss.l_ada.item().unwrap(), 0.0);
        assert!(out.loss.l_reg.item().unwrap() > 0.0);
    }

    #[test]
    fn zero_lambda2_short_circuits_adaptive_term() {
        let mut config = ModelConfig::full(2);
        config.lambda2 = 0.0;
        let (_ps, model) = build(config, 7);
        let x = images(4, 16, 8);
        let labels = [0, 0, 1, 1];
        let mut tape = Tape::new();
        let mut rng = seeded(9);
        let out = model
            .training_step(&mut tape, &x, &labels, &mut rng)
            .unwrap();
        // Virtual synthesis still runs; the adaptive term is exactly zero.
        assert!(out.virtual_count > 0);
        assert_eq!(out.loss.l_ada.item().unwrap(), 0.0);
    }

    #[test]
    fn backward_reaches_every_trainable_parameter() {
        let (ps, model) = build(ModelConfig::full(2), 10);
        let x = images(4, 16, 11);
        let labels = [0, 0, 1, 1];
        let mut tape = Tape::new();
        let mut rng = seeded(12);
        let out = model
            .training_step(&mut tape, &x, &labels, &mut rng)
            .unwrap();
        tape.backward(&out.loss.l_total).unwrap();
        for (name, tensor) in ps.trainable() {
            assert!(tensor.grad().is_some(), "no gradient for {name}");
        }
    }

    #[test]
    fn refiner_parameters_register_only_when_enabled() {
        let (ps_full, _) = build(ModelConfig::full(3), 13);
        assert!(ps_full.contains("refiner.mask.reduce.conv.kernel"));
        assert!(ps_full.contains("extractor.stage0.conv.kernel"));
        assert!(ps_full.contains("classifier.weight"));
        let (ps_base, _) = build(ModelConfig::baseline(3), 14);
        assert!(!ps_base.contains("refiner.mask.reduce.conv.kernel"));
        assert!(ps_base.contains("classifier.weight"));
    }

    #[test]
    fn predictions_follow_probability_argmax() {
        let (_ps, model) = build(ModelConfig::baseline(3), 15);
        let x = images(5, 16, 16);
        let probs = model.eval_probabilities(&x).unwrap();
        let preds = model.predict(&x).unwrap();
        let v = probs.value();
        for (i, p) in preds.iter().enumerate() {
            let row = &v[i * 3..(i + 1) * 3];
            assert!(row.iter().all(|q| *q <= row[*p]));
        }
        // Eval path must be repeatable.
        assert_eq!(preds, model.predict(&x).unwrap());
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        let (_ps, model) = build(ModelConfig::baseline(2), 17);
        let x = images(3, 16, 18);
        let mut tape = Tape::new();
        let mut rng = seeded(19);
        assert!(matches!(
            model.training_step(&mut tape, &x, &[0, 1], &mut rng),
            Err(ModelError::LabelCount {
                images: 3,
                labels: 2
            })
        ));
    }

    #[test]
    fn rejects_single_class_config() {
        let mut ps = ParamSet::new();
        let mut rng = seeded(20);
        assert!(matches!(
            RecognitionModel::init(&mut ps, ModelConfig::full(1), &mut rng),
            Err(ModelError::TooFewClasses(1))
        ));
    }
}
