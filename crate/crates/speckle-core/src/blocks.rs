//! Composite layers assembled from tensor ops: conv+BN+ReLU stacks in 1-D
//! and 2-D, conv+sigmoid for spatial masks, conv+softmax for generated
//! kernels, and the linear softmax classifier.
//!
//! Weight tensors initialize from a zero-mean uniform with bound
//! `sqrt(6 / fan_in)`, biases at zero, BN gain at one and shift at zero.

use rand::Rng;
use thiserror::Error;

use crate::params::{ParamError, ParamKind, ParamSet};
use crate::tensor::{Mode, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum BlockError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Uniform init bound `sqrt(6 / fan_in)`.
fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn init_weight<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let b = init_bound(fan_in);
    Tensor::uniform(shape, -b, b, rng)
}

struct BnParams {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

impl BnParams {
    fn init(ps: &mut ParamSet, prefix: &str, channels: usize) -> Result<Self, BlockError> {
        Ok(BnParams {
            gamma: ps.insert(
                &format!("{prefix}.gamma"),
                Tensor::ones(vec![channels]),
                ParamKind::Trainable,
            )?,
            beta: ps.insert(
                &format!("{prefix}.beta"),
                Tensor::zeros(vec![channels]),
                ParamKind::Trainable,
            )?,
            running_mean: ps.insert(
                &format!("{prefix}.running_mean"),
                Tensor::zeros(vec![channels]),
                ParamKind::State,
            )?,
            running_var: ps.insert(
                &format!("{prefix}.running_var"),
                Tensor::ones(vec![channels]),
                ParamKind::State,
            )?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Tensor, TensorError> {
        tape.batchnorm(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            mode,
        )
    }
}

/// 2-D convolution, batch norm, ReLU.
pub struct ConvBnRelu2d {
    kernel: Tensor,
    bias: Tensor,
    bn: BnParams,
    stride: usize,
    padding: usize,
}

impl ConvBnRelu2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self, BlockError> {
        let fan_in = in_ch * ksize * ksize;
        Ok(ConvBnRelu2d {
            kernel: ps.insert(
                &format!("{prefix}.conv.kernel"),
                init_weight(vec![out_ch, in_ch, ksize, ksize], fan_in, rng),
                ParamKind::Trainable,
            )?,
            bias: ps.insert(
                &format!("{prefix}.conv.bias"),
                Tensor::zeros(vec![out_ch]),
                ParamKind::Trainable,
            )?,
            bn: BnParams::init(ps, &format!("{prefix}.bn"), out_ch)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Tensor, TensorError> {
        let conv = tape.conv2d(x, &self.kernel, Some(&self.bias), self.stride, self.padding)?;
        let normed = self.bn.forward(tape, &conv, mode)?;
        tape.relu(&normed)
    }
}

/// 2-D convolution followed by a sigmoid; produces bounded mask values.
pub struct ConvSigmoid2d {
    kernel: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvSigmoid2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self, BlockError> {
        let fan_in = in_ch * ksize * ksize;
        Ok(ConvSigmoid2d {
            kernel: ps.insert(
                &format!("{prefix}.conv.kernel"),
                init_weight(vec![out_ch, in_ch, ksize, ksize], fan_in, rng),
                ParamKind::Trainable,
            )?,
            bias: ps.insert(
                &format!("{prefix}.conv.bias"),
                Tensor::zeros(vec![out_ch]),
                ParamKind::Trainable,
            )?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, TensorError> {
        let conv = tape.conv2d(x, &self.kernel, Some(&self.bias), self.stride, self.padding)?;
        tape.sigmoid(&conv)
    }

    /// Overwrites the bias with a constant, shifting where the sigmoid
    /// starts; gate-style blocks use this to begin nearly open.
    pub fn fill_bias(&self, value: f64) {
        self.bias.update_data(|d| d.fill(value));
    }
}

/// 1-D convolution, batch norm, ReLU.
pub struct ConvBnRelu1d {
    kernel: Tensor,
    bias: Tensor,
    bn: BnParams,
    stride: usize,
    padding: usize,
}

impl ConvBnRelu1d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self, BlockError> {
        let fan_in = in_ch * ksize;
        Ok(ConvBnRelu1d {
            kernel: ps.insert(
                &format!("{prefix}.conv.kernel"),
                init_weight(vec![out_ch, in_ch, ksize], fan_in, rng),
                ParamKind::Trainable,
            )?,
            bias: ps.insert(
                &format!("{prefix}.conv.bias"),
                Tensor::zeros(vec![out_ch]),
                ParamKind::Trainable,
            )?,
            bn: BnParams::init(ps, &format!("{prefix}.bn"), out_ch)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Tensor, TensorError> {
        let conv = tape.conv1d(x, &self.kernel, Some(&self.bias), self.stride, self.padding)?;
        let normed = self.bn.forward(tape, &conv, mode)?;
        tape.relu(&normed)
    }
}

/// 1-D convolution to a single channel followed by softmax over positions,
/// so each sample's output is a distribution along the signal axis.
pub struct ConvSoftmax1d {
    kernel: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvSoftmax1d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self, BlockError> {
        let fan_in = in_ch * ksize;
        Ok(ConvSoftmax1d {
            kernel: ps.insert(
                &format!("{prefix}.conv.kernel"),
                init_weight(vec![out_ch, in_ch, ksize], fan_in, rng),
                ParamKind::Trainable,
            )?,
            bias: ps.insert(
                &format!("{prefix}.conv.bias"),
                Tensor::zeros(vec![out_ch]),
                ParamKind::Trainable,
            )?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, TensorError> {
        let conv = tape.conv1d(x, &self.kernel, Some(&self.bias), self.stride, self.padding)?;
        tape.softmax(&conv, 2)
    }
}

/// Linear layer plus softmax over classes.
pub struct LinearClassifier {
    weight: Tensor,
    bias: Tensor,
}

impl LinearClassifier {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self, BlockError> {
        Ok(LinearClassifier {
            weight: ps.insert(
                &format!("{prefix}.weight"),
                init_weight(vec![in_dim, classes], in_dim, rng),
                ParamKind::Trainable,
            )?,
            bias: ps.insert(
                &format!("{prefix}.bias"),
                Tensor::zeros(vec![classes]),
                ParamKind::Trainable,
            )?,
        })
    }

    /// Returns `(logits, probabilities)` for `N x D` embeddings.
    pub fn classify(
        &self,
        tape: &mut Tape,
        embeddings: &Tensor,
    ) -> Result<(Tensor, Tensor), TensorError> {
        let prod = tape.matmul(embeddings, &self.weight)?;
        let logits = tape.add(&prod, &self.bias)?;
        let probs = tape.softmax(&logits, 1)?;
        Ok((logits, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::grad_check;

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed | 1;
        (0..n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 2000) as f64 / 1000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn init_bound_follows_fan_in() {
        let mut rng = seeded(1);
        let mut ps = ParamSet::new();
        let block =
            ConvBnRelu2d::init(&mut ps, "b", 8, 4, 3, 1, 1, &mut rng).expect("init block");
        let bound = (6.0f64 / (8.0 * 9.0)).sqrt();
        let k = block.kernel.value();
        assert!(k.iter().all(|v| v.abs() <= bound));
        // Uniform draws should come close to the bound on both sides.
        let max = k.iter().cloned().fold(f64::MIN, f64::max);
        let min = k.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max > bound * 0.5 && min < -bound * 0.5);
        assert_eq!(block.bias.value(), vec![0.0; 4]);
        assert_eq!(block.bn.gamma.value(), vec![1.0; 4]);
        assert_eq!(block.bn.beta.value(), vec![0.0; 4]);
    }

    #[test]
    fn conv_bn_relu_2d_output_is_nonnegative_and_shaped() {
        let mut rng = seeded(2);
        let mut ps = ParamSet::new();
        let block = ConvBnRelu2d::init(&mut ps, "b", 1, 16, 3, 2, 1, &mut rng).unwrap();
        let x = Tensor::new(vec![2, 1, 32, 32], pseudo_random(2 * 32 * 32, 3)).unwrap();
        let mut tape = Tape::new();
        let y = block.forward(&mut tape, &x, Mode::Train).unwrap();
        assert_eq!(y.shape(), vec![2, 16, 16, 16]);
        assert!(y.value().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn conv_sigmoid_2d_bounded_open_interval() {
        let mut rng = seeded(3);
        let mut ps = ParamSet::new();
        let block = ConvSigmoid2d::init(&mut ps, "m", 4, 1, 3, 1, 1, &mut rng).unwrap();
        let x = Tensor::new(vec![2, 4, 6, 6], pseudo_random(2 * 4 * 36, 5)).unwrap();
        let mut tape = Tape::new();
        let y = block.forward(&mut tape, &x).unwrap();
        assert_eq!(y.shape(), vec![2, 1, 6, 6]);
        assert!(y.value().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn conv_softmax_1d_rows_sum_to_one() {
        let mut rng = seeded(4);
        let mut ps = ParamSet::new();
        let block = ConvSoftmax1d::init(&mut ps, "k", 4, 1, 3, 1, 1, &mut rng).unwrap();
        let x = Tensor::new(vec![3, 4, 16], pseudo_random(3 * 4 * 16, 7)).unwrap();
        let mut tape = Tape::new();
        let y = block.forward(&mut tape, &x).unwrap();
        assert_eq!(y.shape(), vec![3, 1, 16]);
        let v = y.value();
        for n in 0..3 {
            let total: f64 = v[n * 16..(n + 1) * 16].iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_rows_are_distributions() {
        let mut rng = seeded(5);
        let mut ps = ParamSet::new();
        let cls = LinearClassifier::init(&mut ps, "cls", 8, 4, &mut rng).unwrap();
        let e = Tensor::new(vec![3, 8], pseudo_random(24, 11)).unwrap();
        let mut tape = Tape::new();
        let (logits, probs) = cls.classify(&mut tape, &e).unwrap();
        assert_eq!(logits.shape(), vec![3, 4]);
        let v = probs.value();
        for n in 0..3 {
            let total: f64 = v[n * 4..(n + 1) * 4].iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(v[n * 4..(n + 1) * 4].iter().all(|p| *p > 0.0));
        }
    }

    #[test]
    fn conv_bn_relu_2d_gradient_passes_grad_check() {
        let mut rng = seeded(6);
        let mut ps = ParamSet::new();
        let block = ConvBnRelu2d::init(&mut ps, "b", 2, 3, 3, 1, 1, &mut rng).unwrap();
        // Weighted sum keeps the loss sensitive to every output element.
        let weights = Tensor::new(vec![2, 3, 4, 4], pseudo_random(96, 13)).unwrap();
        let x = Tensor::new(vec![2, 2, 4, 4], pseudo_random(64, 17)).unwrap();
        let report = grad_check(
            |tape, x| {
                let y = block.forward(tape, x, Mode::Train)?;
                let w = tape.hadamard(&y, &weights)?;
                tape.sum(&w, &[0, 1, 2, 3])
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn classifier_gradient_passes_grad_check() {
        let mut rng = seeded(7);
        let mut ps = ParamSet::new();
        let cls = LinearClassifier::init(&mut ps, "cls", 5, 3, &mut rng).unwrap();
        let x = Tensor::new(vec![2, 5], pseudo_random(10, 19)).unwrap();
        let weights = Tensor::new(vec![2, 3], pseudo_random(6, 23)).unwrap();
        let report = grad_check(
            |tape, x| {
                let (_, probs) = cls.classify(tape, x)?;
                let w = tape.hadamard(&probs, &weights)?;
                tape.sum(&w, &[0, 1])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
