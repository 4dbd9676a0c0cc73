//! Normalization-style ops: softmax, batch normalization, adaptive average
//! pooling, and L2 normalization.

use super::tape::Op;
use super::{shape_string, strides_of, Mode, Tape, Tensor, TensorError};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;
pub(crate) const L2_EPS: f64 = 1e-12;

/// Iterates every 1-D slice along `axis` of a row-major buffer, calling the
/// visitor with (slice start offsets step `inner`, slice length).
fn for_each_slice<F: FnMut(usize, usize)>(shape: &[usize], axis: usize, mut f: F) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner);
        }
    }
}

impl Tape {
    /// Softmax along `axis`, computed with max subtraction so large logits
    /// stay finite.
    pub fn softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
        let (shape, data, rg) = {
            let s = a.borrow();
            if axis >= s.shape.len() {
                return Err(TensorError::InvalidAxis {
                    op: "softmax",
                    axis,
                    rank: s.shape.len(),
                });
            }
            let len = s.shape[axis];
            let mut data = s.data.clone();
            for_each_slice(&s.shape, axis, |start, step| {
                let mut m = f64::NEG_INFINITY;
                for k in 0..len {
                    m = m.max(data[start + k * step]);
                }
                let mut total = 0.0;
                for k in 0..len {
                    let e = (data[start + k * step] - m).exp();
                    data[start + k * step] = e;
                    total += e;
                }
                for k in 0..len {
                    data[start + k * step] /= total;
                }
            });
            (s.shape.clone(), data, s.requires_grad)
        };
        Ok(self.emit(shape, data, rg, Op::Softmax { a: a.clone(), axis }))
    }

    /// Batch normalization over the channel axis (axis 1).
    ///
    /// Train mode normalizes by batch statistics (biased variance) and pushes
    /// running estimates toward them with momentum 0.1, storing unbiased
    /// variance in `running_var`. Eval mode normalizes by the running
    /// estimates. `gamma`, `beta`, and the running stats are all `[C]`.
    pub fn batchnorm(
        &mut self,
        input: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &Tensor,
        running_var: &Tensor,
        mode: Mode,
    ) -> Result<Tensor, TensorError> {
        let (shape, data, rg, mean, inv_std, train, running_update) = {
            let s = input.borrow();
            if s.shape.len() < 2 {
                return Err(TensorError::RankMismatch {
                    op: "batchnorm",
                    expected: 2,
                    actual: s.shape.len(),
                });
            }
            let (n, c) = (s.shape[0], s.shape[1]);
            let spatial: usize = s.shape[2..].iter().product();
            for (name, t) in [
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ] {
                if t.shape() != [c] {
                    return Err(TensorError::ShapeMismatch {
                        op: "batchnorm",
                        left: format!("{name} {}", shape_string(&t.shape())),
                        right: shape_string(&[c]),
                    });
                }
            }
            let count = n * spatial;
            let sg = gamma.borrow();
            let sb = beta.borrow();
            let (mean, var, train) = match mode {
                Mode::Train => {
                    if count <= 1 {
                        return Err(TensorError::DegenerateBatch { count });
                    }
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for ni in 0..n {
                            let base = (ni * c + ch) * spatial;
                            for v in &s.data[base..base + spatial] {
                                acc += v;
                            }
                        }
                        let m = acc / count as f64;
                        let mut vacc = 0.0;
                        for ni in 0..n {
                            let base = (ni * c + ch) * spatial;
                            for v in &s.data[base..base + spatial] {
                                let d = v - m;
                                vacc += d * d;
                            }
                        }
                        mean[ch] = m;
                        var[ch] = vacc / count as f64;
                    }
                    (mean, var, true)
                }
                Mode::Eval => (running_mean.value(), running_var.value(), false),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut data = vec![0.0; s.data.len()];
            for ni in 0..n {
                for ch in 0..c {
                    let base = (ni * c + ch) * spatial;
                    let (m, is, g, b) = (mean[ch], inv_std[ch], sg.data[ch], sb.data[ch]);
                    for k in 0..spatial {
                        data[base + k] = g * (s.data[base + k] - m) * is + b;
                    }
                }
            }
            let running_update = if train {
                // Unbiased variance feeds the running estimate.
                let unbias = count as f64 / (count as f64 - 1.0);
                Some((mean.clone(), var.iter().map(|v| v * unbias).collect::<Vec<_>>()))
            } else {
                None
            };
            let rg = s.requires_grad || sg.requires_grad || sb.requires_grad;
            (s.shape.clone(), data, rg, mean, inv_std, train, running_update)
        };
        if let Some((batch_mean, batch_var)) = running_update {
            running_mean.update_data(|rm| {
                for (r, m) in rm.iter_mut().zip(&batch_mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
            });
            running_var.update_data(|rv| {
                for (r, v) in rv.iter_mut().zip(&batch_var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            });
        }
        Ok(self.emit(
            shape,
            data,
            rg,
            Op::BatchNorm {
                input: input.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean,
                inv_std,
                train,
            },
        ))
    }

    /// Adaptive average pooling of an `N x C x H x W` input to `N x C x h x w`.
    /// Output bin `i` averages input rows `floor(i*H/h) .. ceil((i+1)*H/h)`.
    pub fn adaptive_avg_pool2d(
        &mut self,
        input: &Tensor,
        out_hw: (usize, usize),
    ) -> Result<Tensor, TensorError> {
        let (shape, data, rg) = {
            let s = input.borrow();
            if s.shape.len() != 4 {
                return Err(TensorError::RankMismatch {
                    op: "adaptive_avg_pool",
                    expected: 4,
                    actual: s.shape.len(),
                });
            }
            let (n, c, h, w) = (s.shape[0], s.shape[1], s.shape[2], s.shape[3]);
            let (ho, wo) = out_hw;
            if ho == 0 || wo == 0 || ho > h || wo > w {
                return Err(TensorError::PoolTarget {
                    requested: shape_string(&[ho, wo]),
                    available: shape_string(&[h, w]),
                });
            }
            let mut data = vec![0.0; n * c * ho * wo];
            for img in 0..n * c {
                let in_base = img * h * w;
                let out_base = img * ho * wo;
                for oy in 0..ho {
                    let (y0, y1) = bin_bounds(oy, h, ho);
                    for ox in 0..wo {
                        let (x0, x1) = bin_bounds(ox, w, wo);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                acc += s.data[in_base + y * w + x];
                            }
                        }
                        data[out_base + oy * wo + ox] =
                            acc / ((y1 - y0) * (x1 - x0)) as f64;
                    }
                }
            }
            (vec![n, c, ho, wo], data, s.requires_grad)
        };
        Ok(self.emit(
            shape,
            data,
            rg,
            Op::AdaptiveAvgPool2d {
                input: input.clone(),
            },
        ))
    }

    /// Divides each 1-D slice along `axis` by `max(norm, 1e-12)`, so zero
    /// slices stay zero.
    pub fn l2_normalize(&mut self, a: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
        let (shape, data, rg, norms) = {
            let s = a.borrow();
            if axis >= s.shape.len() {
                return Err(TensorError::InvalidAxis {
                    op: "l2_normalize",
                    axis,
                    rank: s.shape.len(),
                });
            }
            let len = s.shape[axis];
            let mut data = s.data.clone();
            let mut norms = Vec::new();
            for_each_slice(&s.shape, axis, |start, step| {
                let mut sq = 0.0;
                for k in 0..len {
                    let v = data[start + k * step];
                    sq += v * v;
                }
                let norm = sq.sqrt();
                let denom = norm.max(L2_EPS);
                for k in 0..len {
                    data[start + k * step] /= denom;
                }
                norms.push(norm);
            });
            (s.shape.clone(), data, s.requires_grad, norms)
        };
        Ok(self.emit(
            shape,
            data,
            rg,
            Op::L2Normalize {
                a: a.clone(),
                axis,
                norms,
            },
        ))
    }
}

fn bin_bounds(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub(crate) fn backward_softmax(a: &Tensor, axis: usize, out: &Tensor, g: &[f64]) {
    if !a.requires_grad() {
        return;
    }
    let da = {
        let so = out.borrow();
        let len = so.shape[axis];
        let mut da = vec![0.0; so.data.len()];
        for_each_slice(&so.shape, axis, |start, step| {
            let mut dot = 0.0;
            for k in 0..len {
                dot += g[start + k * step] * so.data[start + k * step];
            }
            for k in 0..len {
                let idx = start + k * step;
                da[idx] = so.data[idx] * (g[idx] - dot);
            }
        });
        da
    };
    a.accumulate_grad(&da);
}

pub(crate) fn backward_batchnorm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    train: bool,
    g: &[f64],
) {
    let (d_input, d_gamma, d_beta) = {
        let s = input.borrow();
        let sg = gamma.borrow();
        let (n, c) = (s.shape[0], s.shape[1]);
        let spatial: usize = s.shape[2..].iter().product();
        let count = (n * spatial) as f64;
        let mut d_gamma = vec![0.0; c];
        let mut d_beta = vec![0.0; c];
        let mut sum_g = vec![0.0; c];
        let mut sum_g_xhat = vec![0.0; c];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * spatial;
                for k in 0..spatial {
                    let xhat = (s.data[base + k] - mean[ch]) * inv_std[ch];
                    let gv = g[base + k];
                    sum_g[ch] += gv;
                    sum_g_xhat[ch] += gv * xhat;
                }
            }
        }
        d_gamma.copy_from_slice(&sum_g_xhat);
        d_beta.copy_from_slice(&sum_g);
        let d_input = if s.requires_grad {
            let mut d = vec![0.0; s.data.len()];
            for ni in 0..n {
                for ch in 0..c {
                    let base = (ni * c + ch) * spatial;
                    let scale = sg.data[ch] * inv_std[ch];
                    for k in 0..spatial {
                        let gv = g[base + k];
                        d[base + k] = if train {
                            let xhat = (s.data[base + k] - mean[ch]) * inv_std[ch];
                            scale * (gv - sum_g[ch] / count - xhat * sum_g_xhat[ch] / count)
                        } else {
                            scale * gv
                        };
                    }
                }
            }
            Some(d)
        } else {
            None
        };
        (d_input, d_gamma, d_beta)
    };
    if let Some(d) = d_input {
        input.accumulate_grad(&d);
    }
    if gamma.requires_grad() {
        gamma.accumulate_grad(&d_gamma);
    }
    if beta.requires_grad() {
        beta.accumulate_grad(&d_beta);
    }
}

pub(crate) fn backward_adaptive_avg_pool2d(input: &Tensor, out: &Tensor, g: &[f64]) {
    if !input.requires_grad() {
        return;
    }
    let da = {
        let si = input.borrow();
        let so = out.borrow();
        let (n, c, h, w) = (si.shape[0], si.shape[1], si.shape[2], si.shape[3]);
        let (ho, wo) = (so.shape[2], so.shape[3]);
        let mut da = vec![0.0; si.data.len()];
        for img in 0..n * c {
            let in_base = img * h * w;
            let out_base = img * ho * wo;
            for oy in 0..ho {
                let (y0, y1) = bin_bounds(oy, h, ho);
                for ox in 0..wo {
                    let (x0, x1) = bin_bounds(ox, w, wo);
                    let share = g[out_base + oy * wo + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            da[in_base + y * w + x] += share;
                        }
                    }
                }
            }
        }
        da
    };
    input.accumulate_grad(&da);
}

pub(crate) fn backward_l2_normalize(
    a: &Tensor,
    axis: usize,
    norms: &[f64],
    out: &Tensor,
    g: &[f64],
) {
    if !a.requires_grad() {
        return;
    }
    let da = {
        let so = out.borrow();
        let len = so.shape[axis];
        let mut da = vec![0.0; so.data.len()];
        let mut slice_no = 0usize;
        for_each_slice(&so.shape, axis, |start, step| {
            let norm = norms[slice_no];
            slice_no += 1;
            if norm > L2_EPS {
                let mut dot = 0.0;
                for k in 0..len {
                    dot += g[start + k * step] * so.data[start + k * step];
                }
                for k in 0..len {
                    let idx = start + k * step;
                    da[idx] = (g[idx] - so.data[idx] * dot) / norm;
                }
            } else {
                // Below the floor the op is plain division by the constant.
                for k in 0..len {
                    let idx = start + k * step;
                    da[idx] = g[idx] / L2_EPS;
                }
            }
        });
        da
    };
    a.accumulate_grad(&da);
}

// Strides helper is pulled in by `for_each_slice` callers above.
#[allow(unused_imports)]
use strides_of as _strides_of;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).expect("test tensor")
    }

    /// Softmax oracle: plain exp-normalize per row, no max subtraction.
    fn softmax_oracle(row: &[f64]) -> Vec<f64> {
        let total: f64 = row.iter().map(|v| v.exp()).sum();
        row.iter().map(|v| v.exp() / total).collect()
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle() {
        let rows = [
            vec![0.3, -1.2, 2.0, 0.0],
            vec![1.0, 1.0, 1.0, 1.0],
            vec![-3.0, 0.5, 4.0, 2.5],
        ];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let mut tape = Tape::new();
        let a = t(&[3, 4], &flat);
        let s = tape.softmax(&a, 1).unwrap();
        let got = s.value();
        for (r, row) in rows.iter().enumerate() {
            let want = softmax_oracle(row);
            for k in 0..4 {
                assert!((got[r * 4 + k] - want[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_even_for_huge_logits() {
        let mut tape = Tape::new();
        let a = t(&[2, 3], &[1000.0, 1001.0, 999.0, -1000.0, -1000.0, -1000.0]);
        let s = tape.softmax(&a, 1).unwrap();
        let v = s.value();
        for r in 0..2 {
            let total: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "row {r} sums to {total}");
            assert!(v[r * 3..(r + 1) * 3].iter().all(|p| p.is_finite()));
        }
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut tape = Tape::new();
        let a = t(&[2, 2], &[0.0, 5.0, 0.0, 5.0]);
        let s = tape.softmax(&a, 0).unwrap();
        let v = s.value();
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-12);
        assert!((v[0] - 0.5).abs() < 1e-12);
    }

    /// Per-channel mean/variance oracle over a 4-D buffer using nested loops.
    fn channel_stats(data: &[f64], n: usize, c: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        for ch in 0..c {
            let mut vals = Vec::new();
            for ni in 0..n {
                let base = (ni * c + ch) * spatial;
                vals.extend_from_slice(&data[base..base + spatial]);
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            means[ch] = m;
            vars[ch] = v;
        }
        (means, vars)
    }

    #[test]
    fn batchnorm_train_normalizes_to_zero_mean_unit_var() {
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let mut tape = Tape::new();
        let x = t(&[2, 3, 2, 2], &data);
        let gamma = Tensor::ones(vec![3]);
        let beta = Tensor::zeros(vec![3]);
        let rm = Tensor::zeros(vec![3]);
        let rv = Tensor::ones(vec![3]);
        let y = tape
            .batchnorm(&x, &gamma, &beta, &rm, &rv, Mode::Train)
            .unwrap();
        let (means, vars) = channel_stats(&y.value(), 2, 3, 4);
        for ch in 0..3 {
            assert!(means[ch].abs() < 1e-10, "channel {ch} mean {}", means[ch]);
            assert!((vars[ch] - 1.0).abs() < 1e-3, "channel {ch} var {}", vars[ch]);
        }
    }

    #[test]
    fn batchnorm_running_stats_converge_to_population() {
        // 300 stationary batches with momentum 0.1: the running estimates
        // settle near the stream's per-channel statistics.
        let gamma = Tensor::ones(vec![2]);
        let beta = Tensor::zeros(vec![2]);
        let rm = Tensor::zeros(vec![2]);
        let rv = Tensor::ones(vec![2]);
        let mut state = 42u64;
        let mut draw = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 1000) as f64 / 250.0
        };
        let mut stream: Vec<Vec<f64>> = vec![Vec::new(); 2];
        for _ in 0..300 {
            let data: Vec<f64> = (0..16 * 2 * 4).map(|_| draw()).collect();
            for (i, v) in data.iter().enumerate() {
                stream[(i / 4) % 2].push(*v);
            }
            let mut tape = Tape::no_grad();
            let x = t(&[16, 2, 2, 2], &data);
            tape.batchnorm(&x, &gamma, &beta, &rm, &rv, Mode::Train)
                .unwrap();
        }
        for (ch, vals) in stream.iter().enumerate() {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            let rm_v = rm.value()[ch];
            let rv_v = rv.value()[ch];
            assert!((rm_v - m).abs() < 0.05, "channel {ch}: mean {rm_v} vs {m}");
            assert!((rv_v - v).abs() < 0.1, "channel {ch}: var {rv_v} vs {v}");
        }
    }

    #[test]
    fn batchnorm_rejects_degenerate_batch() {
        let mut tape = Tape::new();
        let x = Tensor::ones(vec![1, 3, 1, 1]);
        let gamma = Tensor::ones(vec![3]);
        let beta = Tensor::zeros(vec![3]);
        let rm = Tensor::zeros(vec![3]);
        let rv = Tensor::ones(vec![3]);
        assert!(matches!(
            tape.batchnorm(&x, &gamma, &beta, &rm, &rv, Mode::Train)
                .unwrap_err(),
            TensorError::DegenerateBatch { count: 1 }
        ));
    }

    #[test]
    fn batchnorm_eval_does_not_touch_running_stats() {
        let mut tape = Tape::no_grad();
        let x = Tensor::ones(vec![2, 1, 2, 2]);
        let gamma = Tensor::ones(vec![1]);
        let beta = Tensor::zeros(vec![1]);
        let rm = Tensor::full(vec![1], 0.25);
        let rv = Tensor::full(vec![1], 2.0);
        tape.batchnorm(&x, &gamma, &beta, &rm, &rv, Mode::Eval)
            .unwrap();
        assert_eq!(rm.value(), vec![0.25]);
        assert_eq!(rv.value(), vec![2.0]);
    }

    /// Pooling oracle: average each bin with explicit floor/ceil bounds.
    fn pool_oracle(data: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
        let mut out = vec![0.0; ho * wo];
        for oy in 0..ho {
            let y0 = oy * h / ho;
            let y1 = ((oy + 1) * h).div_ceil(ho);
            for ox in 0..wo {
                let x0 = ox * w / wo;
                let x1 = ((ox + 1) * w).div_ceil(wo);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += data[y * w + x];
                    }
                }
                out[oy * wo + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
        out
    }

    #[test]
    fn adaptive_pool_matches_bin_oracle() {
        let data: Vec<f64> = (0..36).map(|i| i as f64).collect();
        for &(ho, wo) in &[(1usize, 1usize), (2, 2), (3, 3), (4, 4), (6, 6), (2, 3)] {
            let mut tape = Tape::new();
            let x = t(&[1, 1, 6, 6], &data);
            let y = tape.adaptive_avg_pool2d(&x, (ho, wo)).unwrap();
            let want = pool_oracle(&data, 6, 6, ho, wo);
            let got = y.value();
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{ho}x{wo}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn adaptive_pool_identity_when_sizes_match() {
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.5).collect();
        let mut tape = Tape::new();
        let x = t(&[1, 1, 4, 4], &data);
        let y = tape.adaptive_avg_pool2d(&x, (4, 4)).unwrap();
        assert_eq!(y.value(), data);
    }

    #[test]
    fn adaptive_pool_global_average() {
        let mut tape = Tape::new();
        let x = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]);
        let y = tape.adaptive_avg_pool2d(&x, (1, 1)).unwrap();
        assert_eq!(y.value(), vec![2.5, 25.0]);
    }

    #[test]
    fn adaptive_pool_rejects_upsampling_and_zero() {
        let mut tape = Tape::new();
        let x = Tensor::ones(vec![1, 1, 2, 2]);
        assert!(tape.adaptive_avg_pool2d(&x, (3, 1)).is_err());
        assert!(tape.adaptive_avg_pool2d(&x, (0, 1)).is_err());
    }

    #[test]
    fn l2_normalize_unit_norm_and_zero_vector() {
        let mut tape = Tape::new();
        let a = t(&[2, 3], &[3.0, 0.0, 4.0, 0.0, 0.0, 0.0]);
        let y = tape.l2_normalize(&a, 1).unwrap();
        let v = y.value();
        let norm0 = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        assert!((norm0 - 1.0).abs() < 1e-12);
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_direction_preserved() {
        let mut tape = Tape::new();
        let a = t(&[1, 2], &[-6.0, 8.0]);
        let y = tape.l2_normalize(&a, 1).unwrap();
        assert!((y.value()[0] + 0.6).abs() < 1e-12);
        assert!((y.value()[1] - 0.8).abs() < 1e-12);
    }
}
