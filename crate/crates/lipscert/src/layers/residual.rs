//! Weighted residual shortcut with DropPath.
//!
//! `WRS(x) = x + α ⊙ f(x)`; during training the residual branch is dropped
//! wholesale with probability `p`. The kept path is deliberately NOT
//! rescaled by `1/(1-p)`: rescaling would inflate the block's Lipschitz
//! bound by the same factor. Inference always takes the deterministic sum.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct WrsParams {
    /// Per-channel residual weight, one entry per channel of the input.
    pub alpha: Vec<f64>,
    /// DropPath probability in `[0, 1]`.
    pub drop_prob: f64,
}

impl WrsParams {
    pub fn uniform(alpha: f64, channels: usize, drop_prob: f64) -> Self {
        Self {
            alpha: vec![alpha; channels],
            drop_prob,
        }
    }

    pub fn max_alpha(&self) -> f64 {
        self.alpha.iter().fold(0.0, |m, a| m.max(a.abs()))
    }
}

fn check(x: &Tensor, f_out: &Tensor, params: &WrsParams) -> Result<usize> {
    if x.shape() != f_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "wrs_forward",
            expected: format!("{:?}", x.shape()),
            got: format!("{:?}", f_out.shape()),
        });
    }
    let c = *x.shape().last().unwrap_or(&0);
    if params.alpha.len() != c {
        return Err(Error::ShapeMismatch {
            op: "wrs_forward",
            expected: format!("alpha of length {c}"),
            got: format!("{}", params.alpha.len()),
        });
    }
    if !(0.0..=1.0).contains(&params.drop_prob) {
        return Err(Error::InvalidConfig(format!(
            "drop_prob must be in [0,1], got {}",
            params.drop_prob
        )));
    }
    Ok(c)
}

/// `x + α ⊙ f_out`, with the whole residual branch dropped with probability
/// `drop_prob` in training mode. Returns the output and whether the branch
/// was dropped (always `false` in inference).
pub fn wrs_forward_masked(
    x: &Tensor,
    f_out: &Tensor,
    params: &WrsParams,
    training: bool,
    rng: &mut RngStream,
) -> Result<(Tensor, bool)> {
    let c = check(x, f_out, params)?;
    let dropped = training && rng.uniform() < params.drop_prob;
    if dropped {
        return Ok((x.clone(), true));
    }
    let mut out = x.clone();
    for (row_out, row_f) in out
        .data_mut()
        .chunks_mut(c)
        .zip(f_out.data().chunks(c))
    {
        for j in 0..c {
            row_out[j] += params.alpha[j] * row_f[j];
        }
    }
    Ok((out, false))
}

/// Convenience wrapper discarding the drop mask.
pub fn wrs_forward(
    x: &Tensor,
    f_out: &Tensor,
    params: &WrsParams,
    training: bool,
    rng: &mut RngStream,
) -> Result<Tensor> {
    wrs_forward_masked(x, f_out, params, training, rng).map(|(t, _)| t)
}

/// Reverse-mode gradients of the kept path `x + α ⊙ f_out`: returns
/// (grad x, grad f_out, grad α). For a dropped branch the caller simply
/// passes the cotangent straight through to `x`.
pub fn wrs_vjp(
    x: &Tensor,
    f_out: &Tensor,
    params: &WrsParams,
    cotangent: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let c = check(x, f_out, params)?;
    let gx = cotangent.clone();
    let mut gf = Tensor::zeros(f_out.shape());
    let mut galpha = vec![0.0; c];
    for ((row_g, row_f), row_gf) in cotangent
        .data()
        .chunks(c)
        .zip(f_out.data().chunks(c))
        .zip(gf.data_mut().chunks_mut(c))
    {
        for j in 0..c {
            row_gf[j] = params.alpha[j] * row_g[j];
            galpha[j] += row_f[j] * row_g[j];
        }
    }
    let _ = x;
    Ok((gx, gf, galpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::norm::{center_norm, NormParams};

    #[test]
    fn zero_alpha_is_identity_shortcut() {
        let mut rng = RngStream::new(1, 0);
        let x = rng.normal_tensor(&[3, 4]);
        let f = rng.normal_tensor(&[3, 4]);
        let p = WrsParams::uniform(0.0, 4, 0.0);
        let y = wrs_forward(&x, &f, &p, false, &mut rng).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn full_drop_probability_returns_input() {
        let mut rng = RngStream::new(2, 0);
        let x = rng.normal_tensor(&[8]);
        let f = rng.normal_tensor(&[8]);
        let p = WrsParams::uniform(0.3, 8, 1.0);
        for _ in 0..50 {
            let (y, dropped) = wrs_forward_masked(&x, &f, &p, true, &mut rng).unwrap();
            assert!(dropped);
            assert_eq!(y, x);
        }
    }

    #[test]
    fn scalar_alpha_scaling() {
        let mut rng = RngStream::new(3, 0);
        let x = rng.normal_tensor(&[6]);
        let p = WrsParams::uniform(0.2, 6, 0.0);
        let y = wrs_forward(&x, &x, &p, false, &mut rng).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - 1.2 * b).abs() <= 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = RngStream::new(4, 0);
        let x = rng.normal_tensor(&[4]);
        let f = rng.normal_tensor(&[5]);
        let p = WrsParams::uniform(0.1, 4, 0.0);
        assert!(wrs_forward(&x, &f, &p, false, &mut rng).is_err());
    }

    #[test]
    fn inference_lipschitz_with_unit_branch() {
        // f = center_norm rescaled to exactly 1-Lipschitz; the WRS map is
        // then (1 + max α)-Lipschitz.
        let d = 8;
        let norm = NormParams::identity(d);
        let scale = (d as f64 - 1.0) / d as f64;
        let alpha = 0.3;
        let p = WrsParams::uniform(alpha, d, 0.0);
        let mut rng = RngStream::new(5, 0);
        let f = |x: &Tensor| center_norm(x, &norm).unwrap().scale(scale);
        for _ in 0..2000 {
            let x1 = rng.normal_tensor(&[d]);
            let x2 = rng.normal_tensor(&[d]);
            let y1 = wrs_forward(&x1, &f(&x1), &p, false, &mut rng).unwrap();
            let y2 = wrs_forward(&x2, &f(&x2), &p, false, &mut rng).unwrap();
            let num = y1.sub(&y2).unwrap().frobenius_norm();
            let den = x1.sub(&x2).unwrap().frobenius_norm();
            assert!(num <= (1.0 + alpha) * den + 1e-9);
        }
    }

    #[test]
    fn vjp_alpha_gradient_is_f_times_cotangent() {
        let mut rng = RngStream::new(6, 0);
        let x = rng.normal_tensor(&[5]);
        let f = rng.normal_tensor(&[5]);
        let g = rng.normal_tensor(&[5]);
        let p = WrsParams::uniform(0.0, 5, 0.0);
        let (gx, gf, galpha) = wrs_vjp(&x, &f, &p, &g).unwrap();
        assert_eq!(gx, g);
        // alpha = 0 kills the branch cotangent but not the alpha gradient.
        assert!(gf.data().iter().all(|&v| v == 0.0));
        for j in 0..5 {
            assert!((galpha[j] - f.data()[j] * g.data()[j]).abs() <= 1e-15);
        }
    }
}
