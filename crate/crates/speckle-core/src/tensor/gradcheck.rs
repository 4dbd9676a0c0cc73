//! Central finite-difference verification of analytic gradients.

use super::{Tape, Tensor, TensorError};

const STEP: f64 = 1e-5;

/// Outcome of a [`grad_check`] run.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compares the analytic gradient of `f` at `input` against central finite
/// differences with step 1e-5.
///
/// `f` must build its computation through the tape it is given and return a
/// scalar. The relative error per element is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`; the check passes
/// when the largest error is at most `tol`. The error type is generic so
/// composite blocks with their own error enums check directly.
pub fn grad_check<F, E>(f: F, input: &Tensor, tol: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor, E>,
    E: From<TensorError>,
{
    let base = input.value();
    let shape = input.shape();

    let x = Tensor::new(shape.clone(), base.clone())?.with_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &x)?;
    if loss.numel() != 1 {
        return Err(E::from(TensorError::NonScalarLoss {
            shape: super::shape_string(&loss.shape()),
        }));
    }
    tape.backward(&loss).map_err(E::from)?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; base.len()]);

    let eval = |values: &[f64]| -> Result<f64, E> {
        let probe = Tensor::new(shape.clone(), values.to_vec())?;
        let mut tape = Tape::no_grad();
        f(&mut tape, &probe)?.item().map_err(E::from)
    };

    let mut max_rel_err = 0.0f64;
    let mut plus = base.clone();
    let mut minus = base.clone();
    for i in 0..base.len() {
        plus[i] = base[i] + STEP;
        minus[i] = base[i] - STEP;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
        plus[i] = base[i];
        minus[i] = base[i];
        let denom = 1.0_f64.max(analytic[i].abs()).max(numeric.abs());
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

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

    fn input(shape: &[usize], seed: u64) -> Tensor {
        Tensor::new(shape.to_vec(), pseudo_random(shape.iter().product(), seed)).unwrap()
    }

    /// Shifts values away from zero so ReLU-style kinks stay unprobed.
    fn input_off_kink(shape: &[usize], seed: u64) -> Tensor {
        let data: Vec<f64> = pseudo_random(shape.iter().product(), seed)
            .into_iter()
            .map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn sigmoid_sum_passes() {
        let report = grad_check(
            |tape, x| {
                let y = tape.sigmoid(x)?;
                tape.sum(&y, &[0, 1])
            },
            &input(&[3, 4], 21),
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn relu_passes_away_from_kink() {
        let report = grad_check(
            |tape, x| {
                let y = tape.relu(x)?;
                tape.sum(&y, &[0])
            },
            &input_off_kink(&[10], 5),
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_weighted_sum_passes() {
        let weights = Tensor::new(vec![2, 5], pseudo_random(10, 77)).unwrap();
        let report = grad_check(
            |tape, x| {
                let s = tape.softmax(x, 1)?;
                let w = tape.hadamard(&s, &weights)?;
                tape.sum(&w, &[0, 1])
            },
            &input(&[2, 5], 13),
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn l2_normalize_weighted_sum_passes() {
        let weights = Tensor::new(vec![2, 4], pseudo_random(8, 3)).unwrap();
        let report = grad_check(
            |tape, x| {
                let y = tape.l2_normalize(x, 1)?;
                let w = tape.hadamard(&y, &weights)?;
                tape.sum(&w, &[0, 1])
            },
            &input_off_kink(&[2, 4], 41),
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // exp posing as identity: the analytic grad of sum(exp(x)) differs
        // from the numeric grad of sum(x), so the check must fail.
        let base = input(&[4], 9);
        let report = grad_check(
            |tape, x| {
                // value path: sum(x); but route through exp only on the
                // recording tape to fake a mismatch
                if tape.is_empty() && x.requires_grad() {
                    let y = tape.exp(x)?;
                    tape.sum(&y, &[0])
                } else {
                    tape.sum(x, &[0])
                }
            },
            &base,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
    }
}
