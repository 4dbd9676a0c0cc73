//! Direct (cross-correlation) convolutions in 1-D and 2-D.
//!
//! Inputs are zero-padded into a scratch buffer first so the inner loops
//! run over contiguous rows without bounds juggling. Loop order is fixed,
//! which keeps summation order, and therefore output bits, deterministic.

use super::tape::Op;
use super::{shape_string, Tape, Tensor, TensorError};

impl Tape {
    /// 2-D convolution: input `N x Cin x H x W`, kernel `Cout x Cin x kh x kw`,
    /// optional bias `Cout`. Output spatial size is
    /// `floor((H + 2*padding - kh) / stride) + 1` per axis.
    pub fn conv2d(
        &mut self,
        input: &Tensor,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor, TensorError> {
        let (out_shape, data, rg) = {
            let si = input.borrow();
            let sk = kernel.borrow();
            if si.shape.len() != 4 {
                return Err(TensorError::RankMismatch {
                    op: "conv2d",
                    expected: 4,
                    actual: si.shape.len(),
                });
            }
            if sk.shape.len() != 4 || sk.shape[1] != si.shape[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    left: shape_string(&si.shape),
                    right: shape_string(&sk.shape),
                });
            }
            if stride == 0 {
                return Err(TensorError::Domain {
                    op: "conv2d",
                    detail: "stride must be at least 1".to_string(),
                });
            }
            let (n, cin, h, w) = (si.shape[0], si.shape[1], si.shape[2], si.shape[3]);
            let (cout, _, kh, kw) = (sk.shape[0], sk.shape[1], sk.shape[2], sk.shape[3]);
            let (hp, wp) = (h + 2 * padding, w + 2 * padding);
            if kh > hp || kw > wp {
                return Err(TensorError::KernelTooLarge {
                    kernel: shape_string(&sk.shape),
                    input: shape_string(&si.shape),
                });
            }
            let (oh, ow) = ((hp - kh) / stride + 1, (wp - kw) / stride + 1);
            if let Some(b) = bias {
                let sb = b.borrow();
                if sb.shape != [cout] {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d bias",
                        left: shape_string(&sb.shape),
                        right: shape_string(&[cout]),
                    });
                }
            }
            let padded = pad2d(&si.data, n, cin, h, w, padding);
            let mut out = vec![0.0; n * cout * oh * ow];
            if let Some(b) = bias {
                let sb = b.borrow();
                for ni in 0..n {
                    for co in 0..cout {
                        let base = (ni * cout + co) * oh * ow;
                        out[base..base + oh * ow].fill(sb.data[co]);
                    }
                }
            }
            for ni in 0..n {
                for co in 0..cout {
                    let out_base = (ni * cout + co) * oh * ow;
                    for ci in 0..cin {
                        let in_base = (ni * cin + ci) * hp * wp;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let kv = sk.data[((co * cin + ci) * kh + ky) * kw + kx];
                                if kv == 0.0 {
                                    continue;
                                }
                                for oy in 0..oh {
                                    let iy = oy * stride + ky;
                                    let in_row = in_base + iy * wp + kx;
                                    let out_row = out_base + oy * ow;
                                    for ox in 0..ow {
                                        out[out_row + ox] += kv * padded[in_row + ox * stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let rg = si.requires_grad
                || sk.requires_grad
                || bias.map(|b| b.requires_grad()).unwrap_or(false);
            (vec![n, cout, oh, ow], out, rg)
        };
        Ok(self.emit(
            out_shape,
            data,
            rg,
            Op::Conv2d {
                input: input.clone(),
                kernel: kernel.clone(),
                bias: bias.cloned(),
                stride,
                padding,
            },
        ))
    }

    /// 1-D convolution: input `N x Cin x L`, kernel `Cout x Cin x k`,
    /// optional bias `Cout`.
    pub fn conv1d(
        &mut self,
        input: &Tensor,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor, TensorError> {
        let (out_shape, data, rg) = {
            let si = input.borrow();
            let sk = kernel.borrow();
            if si.shape.len() != 3 {
                return Err(TensorError::RankMismatch {
                    op: "conv1d",
                    expected: 3,
                    actual: si.shape.len(),
                });
            }
            if sk.shape.len() != 3 || sk.shape[1] != si.shape[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d",
                    left: shape_string(&si.shape),
                    right: shape_string(&sk.shape),
                });
            }
            if stride == 0 {
                return Err(TensorError::Domain {
                    op: "conv1d",
                    detail: "stride must be at least 1".to_string(),
                });
            }
            let (n, cin, l) = (si.shape[0], si.shape[1], si.shape[2]);
            let (cout, _, k) = (sk.shape[0], sk.shape[1], sk.shape[2]);
            let lp = l + 2 * padding;
            if k > lp {
                return Err(TensorError::KernelTooLarge {
                    kernel: shape_string(&sk.shape),
                    input: shape_string(&si.shape),
                });
            }
            let ol = (lp - k) / stride + 1;
            if let Some(b) = bias {
                let sb = b.borrow();
                if sb.shape != [cout] {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv1d bias",
                        left: shape_string(&sb.shape),
                        right: shape_string(&[cout]),
                    });
                }
            }
            let padded = pad1d(&si.data, n, cin, l, padding);
            let mut out = vec![0.0; n * cout * ol];
            if let Some(b) = bias {
                let sb = b.borrow();
                for ni in 0..n {
                    for co in 0..cout {
                        let base = (ni * cout + co) * ol;
                        out[base..base + ol].fill(sb.data[co]);
                    }
                }
            }
            for ni in 0..n {
                for co in 0..cout {
                    let out_base = (ni * cout + co) * ol;
                    for ci in 0..cin {
                        let in_base = (ni * cin + ci) * lp;
                        for kx in 0..k {
                            let kv = sk.data[(co * cin + ci) * k + kx];
                            if kv == 0.0 {
                                continue;
                            }
                            for ox in 0..ol {
                                out[out_base + ox] += kv * padded[in_base + ox * stride + kx];
                            }
                        }
                    }
                }
            }
            let rg = si.requires_grad
                || sk.requires_grad
                || bias.map(|b| b.requires_grad()).unwrap_or(false);
            (vec![n, cout, ol], out, rg)
        };
        Ok(self.emit(
            out_shape,
            data,
            rg,
            Op::Conv1d {
                input: input.clone(),
                kernel: kernel.clone(),
                bias: bias.cloned(),
                stride,
                padding,
            },
        ))
    }
}

fn pad2d(data: &[f64], n: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return data.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; n * c * hp * wp];
    for img in 0..n * c {
        for y in 0..h {
            let src = (img * h + y) * w;
            let dst = (img * hp + y + p) * wp + p;
            out[dst..dst + w].copy_from_slice(&data[src..src + w]);
        }
    }
    out
}

fn pad1d(data: &[f64], n: usize, c: usize, l: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return data.to_vec();
    }
    let lp = l + 2 * p;
    let mut out = vec![0.0; n * c * lp];
    for row in 0..n * c {
        out[row * lp + p..row * lp + p + l].copy_from_slice(&data[row * l..(row + 1) * l]);
    }
    out
}

pub(crate) fn backward_conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    g: &[f64],
) {
    let (d_input, d_kernel, d_bias) = {
        let si = input.borrow();
        let sk = kernel.borrow();
        let (n, cin, h, w) = (si.shape[0], si.shape[1], si.shape[2], si.shape[3]);
        let (cout, _, kh, kw) = (sk.shape[0], sk.shape[1], sk.shape[2], sk.shape[3]);
        let (hp, wp) = (h + 2 * padding, w + 2 * padding);
        let (oh, ow) = ((hp - kh) / stride + 1, (wp - kw) / stride + 1);
        let want_input = si.requires_grad;
        let want_kernel = sk.requires_grad;
        let padded = if want_kernel {
            Some(pad2d(&si.data, n, cin, h, w, padding))
        } else {
            None
        };
        let mut d_padded = if want_input {
            Some(vec![0.0; n * cin * hp * wp])
        } else {
            None
        };
        let mut d_kernel = if want_kernel {
            Some(vec![0.0; sk.data.len()])
        } else {
            None
        };
        for ni in 0..n {
            for co in 0..cout {
                let out_base = (ni * cout + co) * oh * ow;
                for ci in 0..cin {
                    let in_base = (ni * cin + ci) * hp * wp;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kidx = ((co * cin + ci) * kh + ky) * kw + kx;
                            let kv = sk.data[kidx];
                            let mut kacc = 0.0;
                            for oy in 0..oh {
                                let iy = oy * stride + ky;
                                let in_row = in_base + iy * wp + kx;
                                let out_row = out_base + oy * ow;
                                for ox in 0..ow {
                                    let gv = g[out_row + ox];
                                    if let Some(dp) = d_padded.as_mut() {
                                        dp[in_row + ox * stride] += kv * gv;
                                    }
                                    if let Some(p) = padded.as_ref() {
                                        kacc += p[in_row + ox * stride] * gv;
                                    }
                                }
                            }
                            if let Some(dk) = d_kernel.as_mut() {
                                dk[kidx] += kacc;
                            }
                        }
                    }
                }
            }
        }
        let d_input = d_padded.map(|dp| crop2d(&dp, n, cin, h, w, padding));
        let d_bias = bias.filter(|b| b.requires_grad()).map(|_| {
            let mut db = vec![0.0; cout];
            for ni in 0..n {
                for (co, acc) in db.iter_mut().enumerate() {
                    let base = (ni * cout + co) * oh * ow;
                    for gv in &g[base..base + oh * ow] {
                        *acc += gv;
                    }
                }
            }
            db
        });
        (d_input, d_kernel, d_bias)
    };
    if let Some(d) = d_input {
        input.accumulate_grad(&d);
    }
    if let Some(d) = d_kernel {
        kernel.accumulate_grad(&d);
    }
    if let (Some(b), Some(d)) = (bias, d_bias) {
        b.accumulate_grad(&d);
    }
}

pub(crate) fn backward_conv1d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    g: &[f64],
) {
    let (d_input, d_kernel, d_bias) = {
        let si = input.borrow();
        let sk = kernel.borrow();
        let (n, cin, l) = (si.shape[0], si.shape[1], si.shape[2]);
        let (cout, _, k) = (sk.shape[0], sk.shape[1], sk.shape[2]);
        let lp = l + 2 * padding;
        let ol = (lp - k) / stride + 1;
        let want_input = si.requires_grad;
        let want_kernel = sk.requires_grad;
        let padded = if want_kernel {
            Some(pad1d(&si.data, n, cin, l, padding))
        } else {
            None
        };
        let mut d_padded = if want_input {
            Some(vec![0.0; n * cin * lp])
        } else {
            None
        };
        let mut d_kernel = if want_kernel {
            Some(vec![0.0; sk.data.len()])
        } else {
            None
        };
        for ni in 0..n {
            for co in 0..cout {
                let out_base = (ni * cout + co) * ol;
                for ci in 0..cin {
                    let in_base = (ni * cin + ci) * lp;
                    for kx in 0..k {
                        let kidx = (co * cin + ci) * k + kx;
                        let kv = sk.data[kidx];
                        let mut kacc = 0.0;
                        for ox in 0..ol {
                            let gv = g[out_base + ox];
                            let ii = in_base + ox * stride + kx;
                            if let Some(dp) = d_padded.as_mut() {
                                dp[ii] += kv * gv;
                            }
                            if let Some(p) = padded.as_ref() {
                                kacc += p[ii] * gv;
                            }
                        }
                        if let Some(dk) = d_kernel.as_mut() {
                            dk[kidx] += kacc;
                        }
                    }
                }
            }
        }
        let d_input = d_padded.map(|dp| crop1d(&dp, n, cin, l, padding));
        let d_bias = bias.filter(|b| b.requires_grad()).map(|_| {
            let mut db = vec![0.0; cout];
            for ni in 0..n {
                for (co, acc) in db.iter_mut().enumerate() {
                    let base = (ni * cout + co) * ol;
                    for gv in &g[base..base + ol] {
                        *acc += gv;
                    }
                }
            }
            db
        });
        (d_input, d_kernel, d_bias)
    };
    if let Some(d) = d_input {
        input.accumulate_grad(&d);
    }
    if let Some(d) = d_kernel {
        kernel.accumulate_grad(&d);
    }
    if let (Some(b), Some(d)) = (bias, d_bias) {
        b.accumulate_grad(&d);
    }
}

fn crop2d(padded: &[f64], n: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return padded.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; n * c * h * w];
    for img in 0..n * c {
        for y in 0..h {
            let src = (img * hp + y + p) * wp + p;
            let dst = (img * h + y) * w;
            out[dst..dst + w].copy_from_slice(&padded[src..src + w]);
        }
    }
    out
}

fn crop1d(padded: &[f64], n: usize, c: usize, l: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return padded.to_vec();
    }
    let lp = l + 2 * p;
    let mut out = vec![0.0; n * c * l];
    for row in 0..n * c {
        out[row * l..(row + 1) * l].copy_from_slice(&padded[row * lp + p..row * lp + p + l]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).expect("test tensor")
    }

    /// Reference conv2d written as seven plain nested loops with explicit
    /// bounds checks, sharing nothing with the padded-buffer implementation.
    fn conv2d_oracle(
        input: &[f64],
        ishape: (usize, usize, usize, usize),
        kernel: &[f64],
        kshape: (usize, usize, usize, usize),
        bias: Option<&[f64]>,
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let (n, cin, h, w) = ishape;
        let (cout, _, kh, kw) = kshape;
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map(|b| b[co]).unwrap_or(0.0);
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let iv = input
                                        [((ni * cin + ci) * h + iy as usize) * w + ix as usize];
                                    let kv = kernel[((co * cin + ci) * kh + ky) * kw + kx];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

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
    fn conv2d_matches_nested_loop_oracle() {
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let ishape = (2, 3, 7, 6);
            let kshape = (4, 3, 3, 3);
            let input = pseudo_random(2 * 3 * 7 * 6, 11 + stride as u64);
            let kernel = pseudo_random(4 * 3 * 3 * 3, 97 + padding as u64);
            let bias = pseudo_random(4, 7);
            let expected = conv2d_oracle(
                &input,
                ishape,
                &kernel,
                kshape,
                Some(&bias),
                stride,
                padding,
            );
            let mut tape = Tape::new();
            let it = t(&[2, 3, 7, 6], &input);
            let kt = t(&[4, 3, 3, 3], &kernel);
            let bt = t(&[4], &bias);
            let out = tape.conv2d(&it, &kt, Some(&bt), stride, padding).unwrap();
            let got = out.value();
            assert_eq!(got.len(), expected.len());
            for (a, b) in got.iter().zip(&expected) {
                assert!(
                    (a - b).abs() < 1e-12,
                    "stride {stride} padding {padding}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn conv2d_single_pixel_identity() {
        // 1x1x1x1 input, 1x1x1x1 kernel, stride 1, no padding: pure product.
        let mut tape = Tape::new();
        let it = t(&[1, 1, 1, 1], &[3.0]);
        let kt = t(&[1, 1, 1, 1], &[-2.0]);
        let out = tape.conv2d(&it, &kt, None, 1, 0).unwrap();
        assert_eq!(out.value(), vec![-6.0]);
    }

    #[test]
    fn conv2d_output_size_follows_floor_formula() {
        let mut tape = Tape::new();
        let it = Tensor::ones(vec![1, 1, 5, 5]);
        let kt = Tensor::ones(vec![1, 1, 3, 3]);
        let out = tape.conv2d(&it, &kt, None, 2, 1).unwrap();
        // floor((5 + 2 - 3) / 2) + 1 = 3
        assert_eq!(out.shape(), vec![1, 1, 3, 3]);
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let mut tape = Tape::new();
        let it = Tensor::ones(vec![1, 1, 2, 2]);
        let kt = Tensor::ones(vec![1, 1, 5, 5]);
        assert!(matches!(
            tape.conv2d(&it, &kt, None, 1, 0).unwrap_err(),
            TensorError::KernelTooLarge { .. }
        ));
    }

    #[test]
    fn conv1d_matches_hand_example() {
        // [1,2,3] * kernel [1,1], stride 1, no padding -> [3,5]
        let mut tape = Tape::new();
        let it = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let kt = t(&[1, 1, 2], &[1.0, 1.0]);
        let out = tape.conv1d(&it, &kt, None, 1, 0).unwrap();
        assert_eq!(out.value(), vec![3.0, 5.0]);
    }

    #[test]
    fn conv1d_padding_grows_output() {
        let mut tape = Tape::new();
        let it = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let kt = t(&[1, 1, 3], &[1.0, 1.0, 1.0]);
        let out = tape.conv1d(&it, &kt, None, 1, 1).unwrap();
        assert_eq!(out.value(), vec![3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let input = pseudo_random(2 * 5 * 5, 3);
        let kernel = pseudo_random(3 * 2 * 3 * 3, 5);
        let bias = pseudo_random(3, 9);
        let loss_of = |inp: &[f64], ker: &[f64], b: &[f64]| -> f64 {
            let mut tape = Tape::no_grad();
            let it = t(&[1, 2, 5, 5], inp);
            let kt = t(&[3, 2, 3, 3], ker);
            let bt = t(&[3], b);
            let out = tape.conv2d(&it, &kt, Some(&bt), 2, 1).unwrap();
            out.value().iter().sum()
        };
        let mut tape = Tape::new();
        let it = t(&[1, 2, 5, 5], &input).with_grad();
        let kt = t(&[3, 2, 3, 3], &kernel).with_grad();
        let bt = t(&[3], &bias).with_grad();
        let out = tape.conv2d(&it, &kt, Some(&bt), 2, 1).unwrap();
        let loss = tape.sum(&out, &[0, 1, 2, 3]).unwrap();
        tape.backward(&loss).unwrap();
        let h = 1e-5;
        type Check<'a> = (Vec<f64>, &'a [f64], Box<dyn Fn(&[f64]) -> f64 + 'a>);
        let checks: Vec<Check> = vec![
            (
                it.grad().unwrap(),
                &input,
                Box::new(|v| loss_of(v, &kernel, &bias)),
            ),
            (
                kt.grad().unwrap(),
                &kernel,
                Box::new(|v| loss_of(&input, v, &bias)),
            ),
            (
                bt.grad().unwrap(),
                &bias,
                Box::new(|v| loss_of(&input, &kernel, v)),
            ),
        ];
        for (analytic, base, f) in checks {
            for i in 0..base.len() {
                let mut plus = base.to_vec();
                plus[i] += h;
                let mut minus = base.to_vec();
                minus[i] -= h;
                let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                let denom = 1.0_f64.max(analytic[i].abs()).max(numeric.abs());
                assert!(
                    ((analytic[i] - numeric) / denom).abs() < 1e-6,
                    "element {i}: analytic {} numeric {}",
                    analytic[i],
                    numeric
                );
            }
        }
    }
}
