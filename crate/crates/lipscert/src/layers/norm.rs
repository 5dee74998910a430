//! CenterNorm and LayerNorm.
//!
//! CenterNorm subtracts the channel mean and rescales by `D/(D-1)`; its
//! Jacobian is the constant matrix `(D/(D-1))(I - 11ᵀ/D)`, so the layer is
//! Lipschitz with constant exactly `D/(D-1)` at `γ = 1`. LayerNorm divides
//! by the input's standard deviation and is kept only as the unbounded
//! counterexample: its Jacobian norm grows without limit as `Std → 0`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp range applied to `γ` and `β` when Lipschitz enforcement through
/// training is enabled.
pub const GAMMA_BETA_CLAMP: (f64, f64) = (-2.0, 2.0);

/// Std substituted for zero when the LayerNorm guard flag is set; keeps the
/// blow-up observable instead of fatal.
pub const LAYER_NORM_STD_FLOOR: f64 = 1e-12;

/// Per-channel scale and shift for a normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NormParams {
    /// `γ = 1`, `β = 0`.
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn clamp_in_place(&mut self) {
        let (lo, hi) = GAMMA_BETA_CLAMP;
        for g in &mut self.gamma {
            *g = g.clamp(lo, hi);
        }
        for b in &mut self.beta {
            *b = b.clamp(lo, hi);
        }
    }
}

fn check_dim(op: &'static str, x: &Tensor, params: &NormParams) -> Result<usize> {
    let d = *x.shape().last().unwrap_or(&0);
    if d < 2 {
        return Err(Error::DegenerateDim(format!(
            "{op}: channel dimension must be >= 2, got {d}"
        )));
    }
    if params.gamma.len() != d || params.beta.len() != d {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("gamma/beta of length {d}"),
            got: format!("{}/{}", params.gamma.len(), params.beta.len()),
        });
    }
    Ok(d)
}

/// `γ ⊙ (D/(D-1))(I - 11ᵀ/D) x + β`, applied over the last axis.
///
/// With `γ = 1`, `β = 0` the output mean is exactly zero and the map has
/// operator norm `D/(D-1)`.
pub fn center_norm(x: &Tensor, params: &NormParams) -> Result<Tensor> {
    let d = check_dim("center_norm", x, params)?;
    let scale = d as f64 / (d as f64 - 1.0);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        for (j, v) in row.iter_mut().enumerate() {
            *v = params.gamma[j] * scale * (*v - mean) + params.beta[j];
        }
    }
    Ok(out)
}

/// The CenterNorm operator matrix `diag(γ) (D/(D-1))(I - 11ᵀ/D)`.
pub fn center_norm_operator(params: &NormParams) -> Tensor {
    let d = params.dim();
    let scale = d as f64 / (d as f64 - 1.0);
    Tensor::from_fn(&[d, d], |idx| {
        let (i, j) = (idx / d, idx % d);
        let proj = if i == j { 1.0 - 1.0 / d as f64 } else { -1.0 / d as f64 };
        params.gamma[i] * scale * proj
    })
}

/// Reverse-mode gradients of `center_norm`. Returns gradients with respect
/// to the input, `γ`, and `β`.
pub fn center_norm_vjp(
    x: &Tensor,
    params: &NormParams,
    cotangent: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let d = check_dim("center_norm_vjp", x, params)?;
    if cotangent.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "center_norm_vjp",
            expected: format!("{:?}", x.shape()),
            got: format!("{:?}", cotangent.shape()),
        });
    }
    let scale = d as f64 / (d as f64 - 1.0);
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = vec![0.0; d];
    let mut gbeta = vec![0.0; d];
    let rows = x.len() / d;
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let gr = &cotangent.data()[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        // gx = scale * (I - 11ᵀ/D) (γ ⊙ g); the projector is symmetric.
        let gg: Vec<f64> = gr
            .iter()
            .zip(&params.gamma)
            .map(|(&g, &gamma)| gamma * g)
            .collect();
        let gg_mean = gg.iter().sum::<f64>() / d as f64;
        let out = &mut gx.data_mut()[r * d..(r + 1) * d];
        for j in 0..d {
            out[j] = scale * (gg[j] - gg_mean);
            ggamma[j] += scale * (xr[j] - mean) * gr[j];
            gbeta[j] += gr[j];
        }
    }
    Ok((gx, ggamma, gbeta))
}

/// Standard LayerNorm with population standard deviation.
///
/// `Std(y) = 0` is an error unless `guard` substitutes a floor of
/// `LAYER_NORM_STD_FLOOR`, which exists so the instability demo can observe
/// the blow-up instead of aborting.
pub fn layer_norm(x: &Tensor, params: &NormParams, guard: bool) -> Result<Tensor> {
    let d = check_dim("layer_norm", x, params)?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let mut std = var.sqrt();
        if std == 0.0 {
            if !guard {
                return Err(Error::ZeroVariance);
            }
            std = LAYER_NORM_STD_FLOOR;
        }
        for (j, v) in row.iter_mut().enumerate() {
            *v = params.gamma[j] * (*v - mean) / std + params.beta[j];
        }
    }
    Ok(out)
}

/// Jacobian of the normalized output `z = y / Std(y)` with respect to `x`
/// for a single vector input: `(1/Std(y)) (I - 11ᵀ/D)(I - yyᵀ/‖y‖²)`.
pub fn layer_norm_jacobian(x: &Tensor) -> Result<Tensor> {
    let d = x.len();
    if x.shape().len() != 1 || d < 2 {
        return Err(Error::DegenerateDim(format!(
            "layer_norm_jacobian expects a vector of dim >= 2, got {:?}",
            x.shape()
        )));
    }
    let mean = x.data().iter().sum::<f64>() / d as f64;
    let y: Vec<f64> = x.data().iter().map(|v| v - mean).collect();
    let y_sq: f64 = y.iter().map(|v| v * v).sum();
    let std = (y_sq / d as f64).sqrt();
    if std == 0.0 {
        return Err(Error::ZeroVariance);
    }
    // (I - 11ᵀ/D)(I - yyᵀ/‖y‖²); the two projectors commute because 1ᵀy = 0.
    let mut jac = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            let centering = if i == j { 1.0 - 1.0 / d as f64 } else { -1.0 / d as f64 };
            let v = centering - y[i] * y[j] / y_sq;
            jac.set(i, j, v / std);
        }
    }
    Ok(jac)
}

/// Reverse-mode gradients of `layer_norm` (guarded variant used in
/// training baselines). Returns gradients for the input, `γ`, and `β`.
pub fn layer_norm_vjp(
    x: &Tensor,
    params: &NormParams,
    cotangent: &Tensor,
    guard: bool,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let d = check_dim("layer_norm_vjp", x, params)?;
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = vec![0.0; d];
    let mut gbeta = vec![0.0; d];
    let rows = x.len() / d;
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let gr = &cotangent.data()[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let y: Vec<f64> = xr.iter().map(|v| v - mean).collect();
        let var = y.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let mut std = var.sqrt();
        if std == 0.0 {
            if !guard {
                return Err(Error::ZeroVariance);
            }
            std = LAYER_NORM_STD_FLOOR;
        }
        let z: Vec<f64> = y.iter().map(|v| v / std).collect();
        // Through out = γ ⊙ z + β.
        let gz: Vec<f64> = gr
            .iter()
            .zip(&params.gamma)
            .map(|(&g, &gamma)| gamma * g)
            .collect();
        for j in 0..d {
            ggamma[j] += z[j] * gr[j];
            gbeta[j] += gr[j];
        }
        // gy = gz/std - y (y·gz)/(D std³); then gx = (I - 11ᵀ/D) gy.
        let y_dot_gz: f64 = y.iter().zip(&gz).map(|(a, b)| a * b).sum();
        let denom = d as f64 * std * std * std;
        let gy: Vec<f64> = y
            .iter()
            .zip(&gz)
            .map(|(&yi, &gi)| gi / std - yi * y_dot_gz / denom)
            .collect();
        let gy_mean = gy.iter().sum::<f64>() / d as f64;
        let out = &mut gx.data_mut()[r * d..(r + 1) * d];
        for j in 0..d {
            out[j] = gy[j] - gy_mean;
        }
    }
    Ok((gx, ggamma, gbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn constant_vector_is_killed() {
        let p = NormParams::identity(4);
        let x = Tensor::vector(&[3.0, 3.0, 3.0, 3.0]);
        let y = center_norm(&x, &p).unwrap();
        for &v in y.data() {
            assert_close(v, 0.0, 1e-15);
        }
    }

    #[test]
    fn mean_zero_input_scaled_by_two_at_d2() {
        let p = NormParams::identity(2);
        let y = center_norm(&Tensor::vector(&[1.0, -1.0]), &p).unwrap();
        assert_eq!(y.data(), &[2.0, -2.0]);
    }

    #[test]
    fn degenerate_dimension_errors() {
        let p = NormParams::identity(1);
        assert!(center_norm(&Tensor::vector(&[5.0]), &p).is_err());
    }

    #[test]
    fn operator_norm_is_d_over_d_minus_one() {
        // Eigenvalue D/(D-1) with multiplicity D-1 and 0 on the constant
        // direction, so the spectral norm is exactly D/(D-1).
        for &d in &[2usize, 4, 64] {
            let m = center_norm_operator(&NormParams::identity(d));
            let expect = d as f64 / (d as f64 - 1.0);
            assert_close(m.spectral_norm(500, 1e-12).value, expect, 1e-10);
        }
    }

    #[test]
    fn output_mean_is_zero_and_map_is_lipschitz() {
        let mut rng = RngStream::new(21, 0);
        for &d in &[2usize, 4, 64] {
            let p = NormParams::identity(d);
            let lip = d as f64 / (d as f64 - 1.0);
            for _ in 0..200 {
                let x1 = rng.normal_tensor(&[d]);
                let x2 = rng.normal_tensor(&[d]);
                let y1 = center_norm(&x1, &p).unwrap();
                let y2 = center_norm(&x2, &p).unwrap();
                let mean: f64 = y1.data().iter().sum::<f64>() / d as f64;
                assert_close(mean, 0.0, 1e-12);
                let dy = y1.sub(&y2).unwrap().frobenius_norm();
                let dx = x1.sub(&x2).unwrap().frobenius_norm();
                assert!(dy <= lip * dx + 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_identity_case() {
        let p = NormParams::identity(2);
        let y = layer_norm(&Tensor::vector(&[1.0, -1.0]), &p, false).unwrap();
        assert_close(y.data()[0], 1.0, 1e-15);
        assert_close(y.data()[1], -1.0, 1e-15);
    }

    #[test]
    fn layer_norm_zero_variance() {
        let p = NormParams::identity(3);
        let x = Tensor::vector(&[2.0, 2.0, 2.0]);
        assert!(matches!(
            layer_norm(&x, &p, false),
            Err(Error::ZeroVariance)
        ));
        // Guarded variant returns finite output instead.
        let y = layer_norm(&x, &p, true).unwrap();
        assert!(y.all_finite());
    }

    #[test]
    fn layer_norm_jacobian_matches_finite_differences() {
        let mut rng = RngStream::new(5, 1);
        let d = 5;
        let x = rng.normal_tensor(&[d]);
        let jac = layer_norm_jacobian(&x).unwrap();
        let h = 1e-6;
        let p = NormParams::identity(d);
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[j] += h;
            xm.data_mut()[j] -= h;
            let fp = layer_norm(&xp, &p, false).unwrap();
            let fm = layer_norm(&xm, &p, false).unwrap();
            for i in 0..d {
                let fd = (fp.data()[i] - fm.data()[i]) / (2.0 * h);
                let a = jac.get(i, j);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-6, "J[{i}][{j}]: analytic {a}, fd {fd}");
            }
        }
    }

    #[test]
    fn layer_norm_jacobian_is_zero_at_d2_antisymmetric_input() {
        // For D=2 both projectors share the same one-dimensional range, and
        // applying them in sequence annihilates it.
        let jac = layer_norm_jacobian(&Tensor::vector(&[1.0, -1.0])).unwrap();
        for &v in jac.data() {
            assert_close(v, 0.0, 1e-14);
        }
    }

    #[test]
    fn layer_norm_jacobian_blows_up_at_small_std() {
        // Scale a fixed mean-zero direction down to Std 1e-4 at D=3.
        let base = [1.0, 0.0, -1.0];
        let target_std = 1e-4;
        let cur_std = (base.iter().map(|v| v * v).sum::<f64>() / 3.0).sqrt();
        let x = Tensor::vector(&base.map(|v| v * target_std / cur_std));
        let jac = layer_norm_jacobian(&x).unwrap();
        assert!(jac.spectral_norm(500, 1e-10).value >= 1e3);
    }

    #[test]
    fn layer_norm_jacobian_norm_grows_inverse_with_std() {
        let base = [0.7, -0.2, -0.5];
        let cur_std = {
            let m: f64 = base.iter().sum::<f64>() / 3.0;
            (base.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 3.0).sqrt()
        };
        let mut prev = 0.0;
        for &s in &[1e-2, 1e-3, 1e-4] {
            let x = Tensor::vector(&base.map(|v| v * s / cur_std));
            let n = layer_norm_jacobian(&x).unwrap().spectral_norm(500, 1e-10).value;
            if prev > 0.0 {
                assert!(n >= 10.0 * prev * 0.99, "growth {prev} -> {n}");
            }
            prev = n;
        }
    }

    #[test]
    fn center_norm_vjp_matches_finite_differences() {
        let mut rng = RngStream::new(9, 9);
        let d = 6;
        let x = rng.normal_tensor(&[d]);
        let mut params = NormParams::identity(d);
        rng.fill_normal(&mut params.gamma);
        rng.fill_normal(&mut params.beta);
        let g = rng.normal_tensor(&[d]);
        let (gx, ggamma, gbeta) = center_norm_vjp(&x, &params, &g).unwrap();
        let h = 1e-6;
        let loss = |x: &Tensor, p: &NormParams| -> f64 {
            center_norm(x, p)
                .unwrap()
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[j] += h;
            xm.data_mut()[j] -= h;
            let fd = (loss(&xp, &params) - loss(&xm, &params)) / (2.0 * h);
            assert_close(gx.data()[j], fd, 1e-7);

            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.gamma[j] += h;
            pm.gamma[j] -= h;
            let fd = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h);
            assert_close(ggamma[j], fd, 1e-7);

            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.beta[j] += h;
            pm.beta[j] -= h;
            let fd = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h);
            assert_close(gbeta[j], fd, 1e-7);
        }
    }

    #[test]
    fn layer_norm_vjp_matches_finite_differences() {
        let mut rng = RngStream::new(31, 2);
        let d = 5;
        let x = rng.normal_tensor(&[d]);
        let params = NormParams::identity(d);
        let g = rng.normal_tensor(&[d]);
        let (gx, _, _) = layer_norm_vjp(&x, &params, &g, false).unwrap();
        let h = 1e-6;
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[j] += h;
            xm.data_mut()[j] -= h;
            let lp: f64 = layer_norm(&xp, &params, false)
                .unwrap()
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum();
            let lm: f64 = layer_norm(&xm, &params, false)
                .unwrap()
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum();
            assert_close(gx.data()[j], (lp - lm) / (2.0 * h), 1e-7);
        }
    }

    #[test]
    fn clamp_respects_range() {
        let mut p = NormParams::identity(3);
        p.gamma = vec![5.0, -7.0, 0.5];
        p.clamp_in_place();
        assert_eq!(p.gamma, vec![2.0, -2.0, 0.5]);
    }
}
