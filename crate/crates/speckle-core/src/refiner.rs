//! Dynamic feature-map refinement.
//!
//! Two conditioning signals are generated from each feature map batch and
//! multiplied back in. A spatial branch squeezes the channels through a
//! bottleneck and collapses to a single-channel per-position sigmoid mask
//! `M`, giving locally gated maps `L = f * M` with `M` broadcast across
//! channels. A kernel branch pools each sample to a channel profile and
//! runs a small 1-D conv stack ending in a softmax, so every sample gets
//! its own channel weighting `k` that sums to one. The refined output is
//! `GL = L * (f * k)` with `k` broadcast over positions.

use rand::Rng;
use thiserror::Error;

use crate::blocks::{BlockError, ConvBnRelu1d, ConvBnRelu2d, ConvSigmoid2d, ConvSoftmax1d};
use crate::params::ParamSet;
use crate::tensor::{Mode, Tape, Tensor, TensorError};

/// Hidden channels of the 1-D kernel branch.
const KERNEL_BRANCH_WIDTH: usize = 4;

/// Initial mask-projection bias. Starting the sigmoid near one keeps the
/// freshly initialized refiner close to a pass-through, so training never
/// begins with every activation halved.
const MASK_BIAS_INIT: f64 = 2.0;

#[derive(Debug, Error)]
pub enum RefinerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error("refiner expects N x {expected} x h x w maps, got {got}")]
    BadInput { expected: usize, got: String },
}

/// Channel width of the spatial bottleneck: a quarter of the input, floored
/// at four.
pub fn bottleneck_channels(channels: usize) -> usize {
    (channels / 4).max(4)
}

/// All intermediate and final products of one refinement pass.
pub struct RefinerOutput {
    /// Sigmoid mask in (0, 1), one channel per position, `N x 1 x h x w`.
    pub mask: Tensor,
    /// Locally gated maps `f * mask`.
    pub local: Tensor,
    /// Per-sample channel weighting, `N x C`, each row a distribution.
    pub kernels: Tensor,
    /// `local * (f * kernels)` with kernels broadcast over positions.
    pub refined: Tensor,
}

/// Generates the mask and per-sample kernels and applies both.
pub struct FeatureRefiner {
    mask_reduce: ConvBnRelu2d,
    mask_project: ConvSigmoid2d,
    kernel_reduce: ConvBnRelu1d,
    kernel_project: ConvSoftmax1d,
    channels: usize,
}

impl FeatureRefiner {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self, RefinerError> {
        let mid = bottleneck_channels(channels);
        let mask_reduce = ConvBnRelu2d::init(
            ps,
            &format!("{prefix}.mask.reduce"),
            channels,
            mid,
            3,
            1,
            1,
            rng,
        )?;
        let mask_project =
            ConvSigmoid2d::init(ps, &format!("{prefix}.mask.project"), mid, 1, 3, 1, 1, rng)?;
        mask_project.fill_bias(MASK_BIAS_INIT);
        Ok(FeatureRefiner {
            mask_reduce,
            mask_project,
            kernel_reduce: ConvBnRelu1d::init(
                ps,
                &format!("{prefix}.kernel.reduce"),
                1,
                KERNEL_BRANCH_WIDTH,
                3,
                1,
                1,
                rng,
            )?,
            kernel_project: ConvSoftmax1d::init(
                ps,
                &format!("{prefix}.kernel.project"),
                KERNEL_BRANCH_WIDTH,
                1,
                3,
                1,
                1,
                rng,
            )?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        maps: &Tensor,
        mode: Mode,
    ) -> Result<RefinerOutput, RefinerError> {
        let shape = maps.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(RefinerError::BadInput {
                expected: self.channels,
                got: crate::tensor::shape_string(&shape),
            });
        }
        let (n, c) = (shape[0], shape[1]);

        let hidden = self.mask_reduce.forward(tape, maps, mode)?;
        let mask = self.mask_project.forward(tape, &hidden)?;
        let local = tape.hadamard(maps, &mask)?;

        let pooled = tape.adaptive_avg_pool2d(maps, (1, 1))?;
        let profile = tape.reshape(&pooled, vec![n, 1, c])?;
        let widened = self.kernel_reduce.forward(tape, &profile, mode)?;
        let distribution = self.kernel_project.forward(tape, &widened)?;
        let kernels = tape.reshape(&distribution, vec![n, c])?;

        let per_position = tape.reshape(&kernels, vec![n, c, 1, 1])?;
        let scaled = tape.hadamard(maps, &per_position)?;
        let refined = tape.hadamard(&local, &scaled)?;
        Ok(RefinerOutput {
            mask,
            local,
            kernels,
            refined,
        })
    }
}
