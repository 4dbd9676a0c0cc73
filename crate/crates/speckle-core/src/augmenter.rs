//! In-network feature augmentation.
//!
//! For every batch the augmenter computes pairwise embedding similarities,
//! mines each anchor's hardest and easiest partners inside and across its
//! class, mixes anchor/partner feature maps into virtual features, and
//! provides the loss family: mixed-label recognition loss, an adaptive
//! hinge on hard-pair similarities whose margin scales with how separated
//! the easy pairs already are, and their weighted total.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};

/// Beta(0.1, 0.1) concentrates mixing weights near 0 and 1, so most virtual
/// features sit close to one parent.
const ALPHA_BETA_PARAM: f64 = 0.1;
/// Probabilities are clamped here before any log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AugmenterError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("similarity matrix must be square N x N matching {labels} labels, got {matrix}")]
    MatrixShape { matrix: String, labels: usize },
    #[error("intensity exponent must be non-negative, got {rho}")]
    InvalidRho { rho: f64 },
    #[error("{what}: expected {expected} entries, got {actual}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{which} loss input is not finite")]
    NonFinite { which: &'static str },
}

/// One mined partner: batch index plus the similarity it was mined at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partner {
    pub index: usize,
    pub similarity: f64,
}

/// Mined partners for one anchor. Slots are `None` when the batch holds no
/// candidate (no other same-class sample, or no other-class sample).
#[derive(Debug, Clone, Default)]
pub struct PairAssignment {
    pub anchor: usize,
    /// Least similar same-class sample.
    pub inner_hard: Option<Partner>,
    /// Most similar different-class sample.
    pub inter_hard: Option<Partner>,
    /// Most similar same-class sample.
    pub inner_easy: Option<Partner>,
    /// Least similar different-class sample.
    pub inter_easy: Option<Partner>,
}

/// Which hard partner a virtual feature was mixed with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartnerKind {
    InnerHard,
    InterHard,
}

/// A mixed feature map carrying both parents' labels.
pub struct VirtualFeature {
    pub anchor: usize,
    pub partner: usize,
    pub kind: PartnerKind,
    pub label_a: usize,
    pub label_b: usize,
    pub alpha: f64,
    /// `C x h x w` mixed map, connected to the tape that built it.
    pub map: Tensor,
}

/// Virtual features synthesized from one batch.
#[derive(Default)]
pub struct VirtualSet {
    pub items: Vec<VirtualFeature>,
}

impl VirtualSet {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    /// Stacks the per-item maps into an `M x C x h x w` batch.
    pub fn batched_maps(&self, tape: &mut Tape) -> Result<Option<Tensor>, TensorError> {
        if self.items.is_empty() {
            return Ok(None);
        }
        let maps: Vec<Tensor> = self.items.iter().map(|v| v.map.clone()).collect();
        Ok(Some(tape.stack0(&maps)?))
    }
}

/// Weighted loss terms for one step.
pub struct LossBreakdown {
    pub l_reg: Tensor,
    pub l_ada: Tensor,
    pub l_total: Tensor,
    pub lambda1: f64,
    pub lambda2: f64,
    pub rho: f64,
}

/// `S = E E^T` for row embeddings; with unit rows every entry is the cosine
/// similarity.
pub fn similarity_matrix(tape: &mut Tape, embeddings: &Tensor) -> Result<Tensor, TensorError> {
    let t = tape.transpose2d(embeddings)?;
    tape.matmul(embeddings, &t)
}

/// Mines the four partner slots per anchor from a similarity matrix. Ties
/// resolve to the smallest index; the anchor itself is never a candidate.
pub fn search_pairs(
    similarities: &Tensor,
    labels: &[usize],
) -> Result<Vec<PairAssignment>, AugmenterError> {
    let shape = similarities.shape();
    let n = labels.len();
    if shape.len() != 2 || shape[0] != n || shape[1] != n {
        return Err(AugmenterError::MatrixShape {
            matrix: crate::tensor::shape_string(&shape),
            labels: n,
        });
    }
    let s = similarities.value();
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut pair = PairAssignment {
            anchor: a,
            ..PairAssignment::default()
        };
        for j in 0..n {
            if j == a {
                continue;
            }
            let sim = s[a * n + j];
            let p = Partner { index: j, similarity: sim };
            if labels[j] == labels[a] {
                replace_if(&mut pair.inner_hard, p, |new, old| new.similarity < old.similarity);
                replace_if(&mut pair.inner_easy, p, |new, old| new.similarity > old.similarity);
            } else {
                replace_if(&mut pair.inter_hard, p, |new, old| new.similarity > old.similarity);
                replace_if(&mut pair.inter_easy, p, |new, old| new.similarity < old.similarity);
            }
        }
        out.push(pair);
    }
    Ok(out)
}

/// Keeps the incumbent unless `better` strictly prefers the candidate, so
/// the smallest index wins ties (candidates arrive in index order).
fn replace_if<F: Fn(&Partner, &Partner) -> bool>(slot: &mut Option<Partner>, p: Partner, better: F) {
    match slot {
        None => *slot = Some(p),
        Some(old) => {
            if better(&p, old) {
                *slot = Some(p);
            }
        }
    }
}

/// How separated each anchor's easy pairs already are:
/// `d_bm = s_inter_easy - s_inner_easy`. `None` when either slot is absent.
pub fn benchmark_distance(pairs: &[PairAssignment]) -> Vec<Option<f64>> {
    pairs
        .iter()
        .map(|p| match (&p.inter_easy, &p.inner_easy) {
            (Some(ie), Some(ne)) => Some(ie.similarity - ne.similarity),
            _ => None,
        })
        .collect()
}

/// Margin intensity per anchor:
/// `psi = (1 - (s_inner_hard - s_inter_hard + 2) / 4)^rho * d_bm`.
///
/// The base lies in [0, 1] for similarities in [-1, 1]; inputs are clamped
/// to that interval so floating-point drift in the dot products cannot push
/// the base negative. The result is a plain number: it acts as a constant
/// in the adaptive loss and never carries gradient.
pub fn dynamic_intensity(
    pairs: &[PairAssignment],
    d_bm: &[Option<f64>],
    rho: f64,
) -> Result<Vec<Option<f64>>, AugmenterError> {
    if !rho.is_finite() || rho < 0.0 {
        return Err(AugmenterError::InvalidRho { rho });
    }
    if d_bm.len() != pairs.len() {
        return Err(AugmenterError::CountMismatch {
            what: "benchmark distances",
            expected: pairs.len(),
            actual: d_bm.len(),
        });
    }
    Ok(pairs
        .iter()
        .zip(d_bm)
        .map(|(p, d)| match (&p.inner_hard, &p.inter_hard, d) {
            (Some(ih), Some(it), Some(d)) => {
                let s_inner = ih.similarity.clamp(-1.0, 1.0);
                let s_inter = it.similarity.clamp(-1.0, 1.0);
                let base = 1.0 - (s_inner - s_inter + 2.0) / 4.0;
                Some(base.powf(rho) * d)
            }
            _ => None,
        })
        .collect())
}

/// Mixes two rows of an `N x C x h x w` map batch:
/// `alpha * maps[a] + (1 - alpha) * maps[p]`, returned as `C x h x w`.
pub fn mixed_map(
    tape: &mut Tape,
    maps: &Tensor,
    anchor: usize,
    partner: usize,
    alpha: f64,
) -> Result<Tensor, TensorError> {
    let shape = maps.shape();
    let fa = tape.index_select0(maps, &[anchor])?;
    let fp = tape.index_select0(maps, &[partner])?;
    let wa = tape.scalar_mul(alpha, &fa)?;
    let wp = tape.scalar_mul(1.0 - alpha, &fp)?;
    let mix = tape.add(&wa, &wp)?;
    tape.reshape(&mix, shape[1..].to_vec())
}

pub(crate) fn draw_alpha<R: Rng>(rng: &mut R) -> f64 {
    let beta = Beta::new(ALPHA_BETA_PARAM, ALPHA_BETA_PARAM).expect("valid Beta parameters");
    beta.sample(rng)
}

/// Builds one virtual feature per (anchor, present hard partner), mixing
/// maps with `alpha ~ Beta(0.1, 0.1)`. An unordered (anchor, partner, kind)
/// triple is emitted only once even when both ends mine each other.
pub fn synthesize_virtual<R: Rng>(
    tape: &mut Tape,
    maps: &Tensor,
    labels: &[usize],
    pairs: &[PairAssignment],
    rng: &mut R,
) -> Result<VirtualSet, AugmenterError> {
    if labels.len() != pairs.len() {
        return Err(AugmenterError::CountMismatch {
            what: "pair assignments",
            expected: labels.len(),
            actual: pairs.len(),
        });
    }
    let mut seen: HashSet<(usize, usize, PartnerKind)> = HashSet::new();
    let mut items = Vec::new();
    for pair in pairs {
        let a = pair.anchor;
        for (slot, kind) in [
            (&pair.inner_hard, PartnerKind::InnerHard),
            (&pair.inter_hard, PartnerKind::InterHard),
        ] {
            let Some(partner) = slot else { continue };
            let p = partner.index;
            let key = (a.min(p), a.max(p), kind);
            if !seen.insert(key) {
                continue;
            }
            let alpha = draw_alpha(rng);
            let map = mixed_map(tape, maps, a, p, alpha)?;
            items.push(VirtualFeature {
                anchor: a,
                partner: p,
                kind,
                label_a: labels[a],
                label_b: labels[p],
                alpha,
                map,
            });
        }
    }
    Ok(VirtualSet { items })
}

fn one_hot(rows: &[usize], classes: usize) -> Result<Tensor, AugmenterError> {
    let mut data = vec![0.0; rows.len() * classes];
    for (i, &label) in rows.iter().enumerate() {
        if label >= classes {
            return Err(AugmenterError::LabelOutOfRange { label, classes });
        }
        data[i * classes + label] = 1.0;
    }
    Ok(Tensor::new(vec![rows.len(), classes], data).expect("one-hot shape"))
}

/// Mean negative log probability of each row's label, with the probability
/// clamped to at least 1e-12 first.
fn mean_neg_log_selected(
    tape: &mut Tape,
    probs: &Tensor,
    selector: &Tensor,
) -> Result<Tensor, TensorError> {
    let picked = tape.hadamard(probs, selector)?;
    let per_row = tape.sum(&picked, &[1])?;
    let clamped = tape.clamp_min(&per_row, PROB_FLOOR)?;
    let logs = tape.log(&clamped)?;
    let mean = tape.mean(&logs, &[0])?;
    tape.scalar_mul(-1.0, &mean)
}

/// Recognition loss: mean cross-entropy of the real rows plus, when virtual
/// features are present, the mean mixed-label cross-entropy
/// `-(alpha * log p[label_a] + (1 - alpha) * log p[label_b])`.
pub fn recognition_loss(
    tape: &mut Tape,
    probs_real: &Tensor,
    labels: &[usize],
    probs_virtual: Option<&Tensor>,
    virtuals: &VirtualSet,
) -> Result<Tensor, AugmenterError> {
    let shape = probs_real.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(AugmenterError::CountMismatch {
            what: "real probability rows",
            expected: labels.len().max(1),
            actual: *shape.first().unwrap_or(&0),
        });
    }
    let classes = shape[1];
    let onehot = one_hot(labels, classes)?;
    let real_mean = mean_neg_log_selected(tape, probs_real, &onehot)?;

    let Some(probs_v) = probs_virtual else {
        if !virtuals.is_empty() {
            return Err(AugmenterError::CountMismatch {
                what: "virtual probability rows",
                expected: virtuals.len(),
                actual: 0,
            });
        }
        return Ok(real_mean);
    };
    let vshape = probs_v.shape();
    if vshape.len() != 2 || vshape[0] != virtuals.len() || vshape[1] != classes {
        return Err(AugmenterError::CountMismatch {
            what: "virtual probability rows",
            expected: virtuals.len(),
            actual: *vshape.first().unwrap_or(&0),
        });
    }
    let m = virtuals.len();
    let labels_a: Vec<usize> = virtuals.items.iter().map(|v| v.label_a).collect();
    let labels_b: Vec<usize> = virtuals.items.iter().map(|v| v.label_b).collect();
    let alphas = Tensor::new(
        vec![m],
        virtuals.items.iter().map(|v| v.alpha).collect(),
    )
    .expect("alpha vector");
    let co_alphas = Tensor::new(
        vec![m],
        virtuals.items.iter().map(|v| 1.0 - v.alpha).collect(),
    )
    .expect("co-alpha vector");

    let sel_a = one_hot(&labels_a, classes)?;
    let sel_b = one_hot(&labels_b, classes)?;
    let log_a = row_log_selected(tape, probs_v, &sel_a)?;
    let log_b = row_log_selected(tape, probs_v, &sel_b)?;
    let wa = tape.hadamard(&log_a, &alphas)?;
    let wb = tape.hadamard(&log_b, &co_alphas)?;
    let mixed = tape.add(&wa, &wb)?;
    let mean = tape.mean(&mixed, &[0])?;
    let virtual_mean = tape.scalar_mul(-1.0, &mean)?;
    Ok(tape.add(&real_mean, &virtual_mean)?)
}

fn row_log_selected(
    tape: &mut Tape,
    probs: &Tensor,
    selector: &Tensor,
) -> Result<Tensor, TensorError> {
    let picked = tape.hadamard(probs, selector)?;
    let per_row = tape.sum(&picked, &[1])?;
    let clamped = tape.clamp_min(&per_row, PROB_FLOOR)?;
    tape.log(&clamped)
}

/// Adaptive hinge over hard pairs, averaged over eligible anchors:
/// `max(s_inter_hard + psi - s_inner_hard, 0)`.
///
/// An anchor is eligible when both hard partners exist and `psi` is present.
/// The hard similarities are re-selected from the matrix tensor, so gradient
/// flows into exactly those entries; `psi` enters as a constant.
pub fn adaptive_loss(
    tape: &mut Tape,
    similarities: &Tensor,
    pairs: &[PairAssignment],
    psi: &[Option<f64>],
) -> Result<Tensor, AugmenterError> {
    let n = pairs.len();
    if psi.len() != n {
        return Err(AugmenterError::CountMismatch {
            what: "intensity values",
            expected: n,
            actual: psi.len(),
        });
    }
    let shape = similarities.shape();
    if shape.len() != 2 || shape[0] != n || shape[1] != n {
        return Err(AugmenterError::MatrixShape {
            matrix: crate::tensor::shape_string(&shape),
            labels: n,
        });
    }
    let mut mask_inter = vec![0.0; n * n];
    let mut mask_inner = vec![0.0; n * n];
    let mut eligible = vec![0.0; n];
    let mut psi_vec = vec![0.0; n];
    let mut count = 0usize;
    for (i, (pair, psi_i)) in pairs.iter().zip(psi).enumerate() {
        let (Some(ih), Some(it), Some(psi_i)) = (&pair.inner_hard, &pair.inter_hard, psi_i)
        else {
            continue;
        };
        mask_inner[i * n + ih.index] = 1.0;
        mask_inter[i * n + it.index] = 1.0;
        eligible[i] = 1.0;
        psi_vec[i] = *psi_i;
        count += 1;
    }
    if count == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let m_inter = Tensor::new(vec![n, n], mask_inter).expect("mask shape");
    let m_inner = Tensor::new(vec![n, n], mask_inner).expect("mask shape");
    let elig = Tensor::new(vec![n], eligible).expect("mask shape");
    let psi_t = Tensor::new(vec![n], psi_vec).expect("psi shape");

    let picked_inter = tape.hadamard(similarities, &m_inter)?;
    let s_inter = tape.sum(&picked_inter, &[1])?;
    let picked_inner = tape.hadamard(similarities, &m_inner)?;
    let s_inner = tape.sum(&picked_inner, &[1])?;
    let shifted = tape.add(&s_inter, &psi_t)?;
    let margin = tape.sub(&shifted, &s_inner)?;
    let hinged = tape.max_with_zero(&margin)?;
    let masked = tape.hadamard(&hinged, &elig)?;
    let total = tape.sum(&masked, &[0])?;
    Ok(tape.scalar_mul(1.0 / count as f64, &total)?)
}

/// `l_total = lambda1 * l_reg + lambda2 * l_ada`. Inputs must be finite
/// scalars.
pub fn total_loss(
    tape: &mut Tape,
    l_reg: &Tensor,
    l_ada: &Tensor,
    lambda1: f64,
    lambda2: f64,
    rho: f64,
) -> Result<LossBreakdown, AugmenterError> {
    for (which, t) in [("recognition", l_reg), ("adaptive", l_ada)] {
        if !t.item()?.is_finite() {
            return Err(AugmenterError::NonFinite { which });
        }
    }
    let t1 = tape.scalar_mul(lambda1, l_reg)?;
    let t2 = tape.scalar_mul(lambda2, l_ada)?;
    let l_total = tape.add(&t1, &t2)?;
    Ok(LossBreakdown {
        l_reg: l_reg.clone(),
        l_ada: l_ada.clone(),
        l_total,
        lambda1,
        lambda2,
        rho,
    })
}
