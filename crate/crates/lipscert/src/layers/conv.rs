//! Convolution blocks: a 7x7 depthwise convolution followed by a 1x1
//! pointwise convolution, plus the non-overlapped strided convolutions used
//! for patch embedding and patch merging. All maps here are affine, and the
//! certifier can materialize their exact operator matrices at toy scale.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernel size of the in-block depthwise convolution (zero padding 3).
pub const DEPTHWISE_KSIZE: usize = 7;

/// Parameters of one conv block: per-channel depthwise kernels stored as
/// `[C, K, K]` and a pointwise mixing matrix `[C_in, C_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    pub depthwise: Tensor,
    pub pointwise: Tensor,
}

impl ConvBlockParams {
    pub fn channels_in(&self) -> usize {
        self.depthwise.shape()[0]
    }

    pub fn channels_out(&self) -> usize {
        self.pointwise.shape()[1]
    }

    /// Centered-delta depthwise kernels and identity pointwise: the block
    /// becomes the identity map.
    pub fn identity(channels: usize) -> Self {
        let k = DEPTHWISE_KSIZE;
        let mid = k / 2;
        let depthwise = Tensor::from_fn(&[channels, k, k], |idx| {
            let within = idx % (k * k);
            if within == mid * k + mid {
                1.0
            } else {
                0.0
            }
        });
        Self {
            depthwise,
            pointwise: Tensor::eye(channels),
        }
    }
}

fn grid_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if x.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op,
            expected: "rank-3 tensor [H, W, C]".into(),
            got: format!("{:?}", x.shape()),
        });
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// Depthwise KxK convolution, zero padding K/2, stride 1.
pub fn depthwise_forward(x: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let (h, w, c) = grid_dims(x, "depthwise_forward")?;
    let k = kernels.shape()[1];
    if kernels.shape() != [c, k, k] {
        return Err(Error::ShapeMismatch {
            op: "depthwise_forward",
            expected: format!("kernels [{c}, K, K]"),
            got: format!("{:?}", kernels.shape()),
        });
    }
    let pad = k / 2;
    let mut out = Tensor::zeros(&[h, w, c]);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for a in 0..k {
                    let ii = i as isize + a as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for b in 0..k {
                        let jj = j as isize + b as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let kv = kernels.data()[(ch * k + a) * k + b];
                        let xv = x.data()[((ii as usize) * w + jj as usize) * c + ch];
                        acc += kv * xv;
                    }
                }
                out.data_mut()[(i * w + j) * c + ch] = acc;
            }
        }
    }
    Ok(out)
}

/// Gradients of `depthwise_forward` with respect to the input and kernels.
pub fn depthwise_vjp(x: &Tensor, kernels: &Tensor, cotangent: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w, c) = grid_dims(x, "depthwise_vjp")?;
    let k = kernels.shape()[1];
    let pad = k / 2;
    let mut gx = Tensor::zeros(&[h, w, c]);
    let mut gk = Tensor::zeros(kernels.shape());
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let g = cotangent.data()[(i * w + j) * c + ch];
                if g == 0.0 {
                    continue;
                }
                for a in 0..k {
                    let ii = i as isize + a as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for b in 0..k {
                        let jj = j as isize + b as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let xv = x.data()[((ii as usize) * w + jj as usize) * c + ch];
                        gk.data_mut()[(ch * k + a) * k + b] += g * xv;
                        gx.data_mut()[((ii as usize) * w + jj as usize) * c + ch] +=
                            g * kernels.data()[(ch * k + a) * k + b];
                    }
                }
            }
        }
    }
    Ok((gx, gk))
}

/// 1x1 pointwise convolution: per position `y = Wᵀ x` with `W: [C_in, C_out]`.
pub fn pointwise_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (h, wd, c) = grid_dims(x, "pointwise_forward")?;
    if w.rows() != c {
        return Err(Error::ShapeMismatch {
            op: "pointwise_forward",
            expected: format!("weight rows {c}"),
            got: format!("{}", w.rows()),
        });
    }
    let c_out = w.cols();
    let mut out = Tensor::zeros(&[h, wd, c_out]);
    for pos in 0..h * wd {
        let xin = &x.data()[pos * c..(pos + 1) * c];
        let y = w.matvec_t(xin);
        out.data_mut()[pos * c_out..(pos + 1) * c_out].copy_from_slice(&y);
    }
    Ok(out)
}

/// Gradients of `pointwise_forward` with respect to the input and weight.
pub fn pointwise_vjp(x: &Tensor, w: &Tensor, cotangent: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, wd, c) = grid_dims(x, "pointwise_vjp")?;
    let c_out = w.cols();
    let mut gx = Tensor::zeros(&[h, wd, c]);
    let mut gw = Tensor::zeros(&[c, c_out]);
    for pos in 0..h * wd {
        let xin = &x.data()[pos * c..(pos + 1) * c];
        let g = &cotangent.data()[pos * c_out..(pos + 1) * c_out];
        let gxi = w.matvec(g);
        gx.data_mut()[pos * c..(pos + 1) * c].copy_from_slice(&gxi);
        for i in 0..c {
            if xin[i] == 0.0 {
                continue;
            }
            for j in 0..c_out {
                gw.data_mut()[i * c_out + j] += xin[i] * g[j];
            }
        }
    }
    Ok((gx, gw))
}

/// Depthwise then pointwise.
pub fn conv_block(x: &Tensor, params: &ConvBlockParams) -> Result<Tensor> {
    let (_, _, c) = grid_dims(x, "conv_block")?;
    if params.channels_in() != c {
        return Err(Error::ShapeMismatch {
            op: "conv_block",
            expected: format!("{} channels", params.channels_in()),
            got: format!("{c}"),
        });
    }
    let mid = depthwise_forward(x, &params.depthwise)?;
    pointwise_forward(&mid, &params.pointwise)
}

/// Non-overlapped KxK convolution with stride K (patch embedding and patch
/// merging). The weight is the flattened-patch operator `[(K·K·C_in), C_out]`.
pub fn patch_conv_forward(x: &Tensor, w: &Tensor, k: usize) -> Result<Tensor> {
    let (h, wd, c) = grid_dims(x, "patch_conv_forward")?;
    if h % k != 0 || wd % k != 0 {
        return Err(Error::ShapeMismatch {
            op: "patch_conv_forward",
            expected: format!("spatial extents divisible by {k}"),
            got: format!("{h}x{wd}"),
        });
    }
    if w.rows() != k * k * c {
        return Err(Error::ShapeMismatch {
            op: "patch_conv_forward",
            expected: format!("weight rows {}", k * k * c),
            got: format!("{}", w.rows()),
        });
    }
    let (ho, wo, c_out) = (h / k, wd / k, w.cols());
    let mut out = Tensor::zeros(&[ho, wo, c_out]);
    let mut patch = vec![0.0; k * k * c];
    for po in 0..ho {
        for qo in 0..wo {
            for a in 0..k {
                for b in 0..k {
                    let src = ((po * k + a) * wd + qo * k + b) * c;
                    let dst = (a * k + b) * c;
                    patch[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                }
            }
            let y = w.matvec_t(&patch);
            out.data_mut()[(po * wo + qo) * c_out..(po * wo + qo + 1) * c_out]
                .copy_from_slice(&y);
        }
    }
    Ok(out)
}

/// Gradients of `patch_conv_forward` with respect to the input and weight.
pub fn patch_conv_vjp(
    x: &Tensor,
    w: &Tensor,
    k: usize,
    cotangent: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (h, wd, c) = grid_dims(x, "patch_conv_vjp")?;
    let (ho, wo, c_out) = (h / k, wd / k, w.cols());
    let mut gx = Tensor::zeros(&[h, wd, c]);
    let mut gw = Tensor::zeros(&[k * k * c, c_out]);
    let mut patch = vec![0.0; k * k * c];
    for po in 0..ho {
        for qo in 0..wo {
            for a in 0..k {
                for b in 0..k {
                    let src = ((po * k + a) * wd + qo * k + b) * c;
                    let dst = (a * k + b) * c;
                    patch[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                }
            }
            let g = &cotangent.data()[(po * wo + qo) * c_out..(po * wo + qo + 1) * c_out];
            let gpatch = w.matvec(g);
            for i in 0..k * k * c {
                if patch[i] != 0.0 {
                    for j in 0..c_out {
                        gw.data_mut()[i * c_out + j] += patch[i] * g[j];
                    }
                }
            }
            for a in 0..k {
                for b in 0..k {
                    let src = (a * k + b) * c;
                    let dst = ((po * k + a) * wd + qo * k + b) * c;
                    gx.data_mut()[dst..dst + c].copy_from_slice(&gpatch[src..src + c]);
                }
            }
        }
    }
    Ok((gx, gw))
}

/// Materialize the exact linear operator of one channel's depthwise
/// convolution as an `HW x HW` matrix (for operator-norm certification).
pub fn depthwise_operator_matrix(kernel: &[f64], k: usize, h: usize, w: usize) -> Tensor {
    let pad = k / 2;
    let n = h * w;
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..h {
        for j in 0..w {
            let row = i * w + j;
            for a in 0..k {
                let ii = i as isize + a as isize - pad as isize;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for b in 0..k {
                    let jj = j as isize + b as isize - pad as isize;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let col = (ii as usize) * w + jj as usize;
                    m.set(row, col, kernel[a * k + b]);
                }
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn identity_block_is_identity() {
        let mut rng = RngStream::new(8, 0);
        let x = rng.normal_tensor(&[5, 5, 2]);
        let y = conv_block(&x, &ConvBlockParams::identity(2)).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn zero_kernels_give_zero_output() {
        let mut rng = RngStream::new(9, 0);
        let x = rng.normal_tensor(&[4, 4, 3]);
        let params = ConvBlockParams {
            depthwise: Tensor::zeros(&[3, 7, 7]),
            pointwise: Tensor::zeros(&[3, 3]),
        };
        let y = conv_block(&x, &params).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::zeros(&[4, 4, 3]);
        assert!(conv_block(&x, &ConvBlockParams::identity(2)).is_err());
    }

    #[test]
    fn matches_naive_sliding_window_oracle() {
        let mut rng = RngStream::new(10, 0);
        let (h, w, c) = (5, 5, 2);
        let x = rng.normal_tensor(&[h, w, c]);
        let kernels = rng.normal_tensor(&[c, 7, 7]);
        let pw = rng.normal_tensor(&[c, c]);
        let got = conv_block(
            &x,
            &ConvBlockParams {
                depthwise: kernels.clone(),
                pointwise: pw.clone(),
            },
        )
        .unwrap();
        // Direct convolution oracle, written independently.
        for i in 0..h {
            for j in 0..w {
                let mut mid = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for a in 0..7usize {
                        for b in 0..7usize {
                            let ii = i as isize + a as isize - 3;
                            let jj = j as isize + b as isize - 3;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            acc += kernels.data()[(ch * 7 + a) * 7 + b]
                                * x.data()[((ii as usize) * w + jj as usize) * c + ch];
                        }
                    }
                    mid[ch] = acc;
                }
                for co in 0..c {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += mid[ci] * pw.get(ci, co);
                    }
                    let diff = (got.data()[(i * w + j) * c + co] - acc).abs();
                    assert!(diff <= 1e-12, "mismatch at ({i},{j},{co}): {diff}");
                }
            }
        }
    }

    #[test]
    fn depthwise_operator_matrix_matches_forward() {
        let mut rng = RngStream::new(11, 0);
        let (h, w) = (4, 4);
        let kernel: Vec<f64> = (0..49).map(|_| rng.normal()).collect();
        let kernels = Tensor::new(&[1, 7, 7], kernel.clone()).unwrap();
        let x = rng.normal_tensor(&[h, w, 1]);
        let y = depthwise_forward(&x, &kernels).unwrap();
        let m = depthwise_operator_matrix(&kernel, 7, h, w);
        let y2 = m.matvec(x.data());
        for (a, b) in y.data().iter().zip(&y2) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn patch_conv_partitions_the_input() {
        let mut rng = RngStream::new(12, 0);
        let x = rng.normal_tensor(&[4, 4, 2]);
        // Identity on flattened 2x2 patches: C_out = 2*2*2.
        let w = Tensor::eye(8);
        let y = patch_conv_forward(&x, &w, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 8]);
        // First output position holds the first patch in (a, b, c) order.
        let expected = [
            x.data()[(0 * 4 + 0) * 2],
            x.data()[(0 * 4 + 0) * 2 + 1],
            x.data()[(0 * 4 + 1) * 2],
            x.data()[(0 * 4 + 1) * 2 + 1],
            x.data()[(1 * 4 + 0) * 2],
            x.data()[(1 * 4 + 0) * 2 + 1],
            x.data()[(1 * 4 + 1) * 2],
            x.data()[(1 * 4 + 1) * 2 + 1],
        ];
        assert_eq!(&y.data()[..8], &expected);
    }

    #[test]
    fn conv_vjps_match_finite_differences() {
        let mut rng = RngStream::new(13, 0);
        let (h, w, c) = (3, 3, 2);
        let x = rng.normal_tensor(&[h, w, c]);
        let kernels = rng.normal_tensor(&[c, 7, 7]);
        let g = rng.normal_tensor(&[h, w, c]);
        let (gx, gk) = depthwise_vjp(&x, &kernels, &g).unwrap();
        let loss = |x: &Tensor, k: &Tensor| -> f64 {
            depthwise_forward(x, k)
                .unwrap()
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let hstep = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[idx] += hstep;
            xm.data_mut()[idx] -= hstep;
            let fd = (loss(&xp, &kernels) - loss(&xm, &kernels)) / (2.0 * hstep);
            assert!((gx.data()[idx] - fd).abs() <= 1e-6);
        }
        for idx in 0..kernels.len() {
            let mut kp = kernels.clone();
            let mut km = kernels.clone();
            kp.data_mut()[idx] += hstep;
            km.data_mut()[idx] -= hstep;
            let fd = (loss(&x, &kp) - loss(&x, &km)) / (2.0 * hstep);
            assert!((gk.data()[idx] - fd).abs() <= 1e-6);
        }
    }

    #[test]
    fn patch_conv_vjp_matches_finite_differences() {
        let mut rng = RngStream::new(14, 0);
        let x = rng.normal_tensor(&[4, 4, 2]);
        let w = rng.normal_tensor(&[8, 3]);
        let g = rng.normal_tensor(&[2, 2, 3]);
        let (gx, gw) = patch_conv_vjp(&x, &w, 2, &g).unwrap();
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            patch_conv_forward(x, w, 2)
                .unwrap()
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[idx] += h;
            xm.data_mut()[idx] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((gx.data()[idx] - fd).abs() <= 1e-6);
        }
        for idx in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.data_mut()[idx] += h;
            wm.data_mut()[idx] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((gw.data()[idx] - fd).abs() <= 1e-6);
        }
    }
}
