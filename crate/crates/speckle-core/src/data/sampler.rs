//! Class-balanced batch planning.
//!
//! An epoch is a list of batches, each holding exactly `classes_per_batch`
//! distinct classes with `samples_per_class` samples from each. Every class
//! is shuffled and cut into full-size chunks (the last chunk wraps around
//! to stay full), then batches greedily take chunks from the classes with
//! the most work left. When fewer classes than needed still have chunks,
//! the batch is padded with fresh draws from already-exhausted classes, so
//! every sample appears at least once per epoch and every batch has the
//! exact promised shape.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("classes per batch must be at least 2, got {got}")]
    TooFewClassesPerBatch { got: usize },
    #[error("samples per class must be at least 2, got {got}")]
    TooFewSamplesPerClass { got: usize },
    #[error("{requested} classes per batch exceeds the {available} dataset classes")]
    NotEnoughClasses { requested: usize, available: usize },
    #[error("class {class} has {count} samples, fewer than the {needed} per batch")]
    ClassTooSmall {
        class: usize,
        count: usize,
        needed: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// Plans one epoch of balanced batches over `labels`.
pub fn plan_batches<R: Rng>(
    labels: &[usize],
    classes: usize,
    classes_per_batch: usize,
    samples_per_class: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, SamplerError> {
    if classes_per_batch < 2 {
        return Err(SamplerError::TooFewClassesPerBatch {
            got: classes_per_batch,
        });
    }
    if samples_per_class < 2 {
        return Err(SamplerError::TooFewSamplesPerClass {
            got: samples_per_class,
        });
    }
    if classes_per_batch > classes {
        return Err(SamplerError::NotEnoughClasses {
            requested: classes_per_batch,
            available: classes,
        });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (index, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(SamplerError::LabelOutOfRange { label, classes });
        }
        by_class[label].push(index);
    }
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < samples_per_class {
            return Err(SamplerError::ClassTooSmall {
                class,
                count: members.len(),
                needed: samples_per_class,
            });
        }
        members.shuffle(rng);
    }

    // Cut each class into chunks of exactly `samples_per_class`; a short
    // tail wraps around to the front of the shuffle.
    let mut chunks: Vec<Vec<Vec<usize>>> = by_class
        .iter()
        .map(|members| {
            let n = members.len();
            let count = n.div_ceil(samples_per_class);
            (0..count)
                .map(|i| {
                    (0..samples_per_class)
                        .map(|j| members[(i * samples_per_class + j) % n])
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut batches = Vec::new();
    loop {
        let mut candidates: Vec<usize> = (0..classes).filter(|c| !chunks[*c].is_empty()).collect();
        if candidates.is_empty() {
            break;
        }
        // Most remaining chunks first; ties fall to the smaller class id.
        candidates.sort_by_key(|c| (usize::MAX - chunks[*c].len(), *c));
        let mut batch = Vec::with_capacity(classes_per_batch * samples_per_class);
        let mut used = Vec::with_capacity(classes_per_batch);
        for &class in candidates.iter().take(classes_per_batch) {
            batch.extend(chunks[class].pop().expect("candidate has a chunk"));
            used.push(class);
        }
        // Pad with fresh draws from exhausted classes when needed.
        let mut fillers: Vec<usize> = (0..classes).filter(|c| !used.contains(c)).collect();
        while used.len() < classes_per_batch {
            let class = fillers.remove(0);
            let picks: Vec<usize> = by_class[class]
                .choose_multiple(rng, samples_per_class)
                .copied()
                .collect();
            batch.extend(picks);
            used.push(class);
        }
        batch.shuffle(rng);
        batches.push(batch);
    }
    Ok(batches)
}
