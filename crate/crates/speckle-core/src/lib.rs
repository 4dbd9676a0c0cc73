//! A small, self-contained lab for studying image recognition under
//! limited training data.
//!
//! Everything runs on a minimal reverse-mode autodiff engine over dense
//! `f64` tensors ([`tensor`]). On top of that sit a compact CNN feature
//! extractor ([`extractor`]), an in-network feature augmenter that mines
//! hard/easy sample pairs and mixes virtual features ([`augmenter`]), a
//! dynamic feature refiner that applies a learned spatial mask and
//! per-sample channel kernels ([`refiner`]), and a training/evaluation
//! harness with an ablation runner ([`trainer`], [`evaluator`]).
//!
//! Input imagery is synthetic: bright Gaussian scatterers under
//! multiplicative unit-mean exponential speckle ([`data`]).

#![forbid(unsafe_code)]

pub mod augmenter;
pub mod blocks;
pub mod data;
pub mod evaluator;
pub mod extractor;
pub mod model;
pub mod params;
pub mod refiner;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;
