//! Weight initializers: Xavier, truncated normal, and spectral
//! initialization (`W / σmax(W)`, which makes the affine map 1-Lipschitz at
//! the start of training).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Xavier,
    TruncNormal,
    Spectral,
}

/// Default truncated-normal std and symmetric bounds (±2 std).
pub const TRUNC_NORMAL_STD: f64 = 0.02;

/// Power-iteration budget used when normalizing a fresh draw.
const SPECTRAL_INIT_ITERS: usize = 500;
const SPECTRAL_INIT_TOL: f64 = 1e-12;

/// Entries `~ Normal(0, 2/(fan_in + fan_out))` for a 2-D shape.
pub fn xavier_init(shape: &[usize], rng: &mut RngStream) -> Tensor {
    assert_eq!(shape.len(), 2, "xavier_init expects a 2-D shape");
    let (fan_in, fan_out) = (shape[0], shape[1]);
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = std * rng.normal();
    }
    t
}

/// Divide a weight by its largest singular value so `σmax = 1`.
///
/// Exposed separately from [`spectral_init`] so tests can inject a known
/// draw.
pub fn spectral_normalize(w: &Tensor) -> Result<Tensor> {
    let sigma = w.spectral_norm(SPECTRAL_INIT_ITERS, SPECTRAL_INIT_TOL).value;
    if sigma == 0.0 {
        return Err(Error::InitFailure("cannot normalize an all-zero draw".into()));
    }
    Ok(w.scale(1.0 / sigma))
}

/// Xavier draw divided by its spectral norm. An all-zero draw (probability
/// ~0) is redrawn once before giving up.
pub fn spectral_init(shape: &[usize], rng: &mut RngStream) -> Result<Tensor> {
    let w = xavier_init(shape, rng);
    match spectral_normalize(&w) {
        Ok(t) => Ok(t),
        Err(_) => spectral_normalize(&xavier_init(shape, rng)),
    }
}

/// Rejection-sampled normal truncated to symmetric `bounds` around zero.
/// `std = 0` short-circuits to all zeros.
pub fn trunc_normal_init(
    shape: &[usize],
    std: f64,
    bounds: (f64, f64),
    rng: &mut RngStream,
) -> Result<Tensor> {
    let (lo, hi) = bounds;
    if lo != -hi || hi < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "trunc_normal bounds must be symmetric around 0, got ({lo}, {hi})"
        )));
    }
    let mut t = Tensor::zeros(shape);
    if std == 0.0 {
        return Ok(t);
    }
    for v in t.data_mut() {
        *v = loop {
            let draw = std * rng.normal();
            if draw >= lo && draw <= hi {
                break draw;
            }
        };
    }
    Ok(t)
}

/// `trunc_normal_init` with the crate defaults (std 0.02, bounds ±2 std).
pub fn trunc_normal_default(shape: &[usize], rng: &mut RngStream) -> Tensor {
    trunc_normal_init(
        shape,
        TRUNC_NORMAL_STD,
        (-2.0 * TRUNC_NORMAL_STD, 2.0 * TRUNC_NORMAL_STD),
        rng,
    )
    .expect("default bounds are symmetric")
}

/// Initialize a 2-D weight per the configured kind. Spectral normalization
/// applies to feed-forward and convolution weights; attention projections
/// stay Xavier under the spectral kind because their rows are re-normalized
/// inside the attention itself.
pub fn init_weight(kind: InitKind, shape: &[usize], rng: &mut RngStream) -> Result<Tensor> {
    match kind {
        InitKind::Xavier => Ok(xavier_init(shape, rng)),
        InitKind::TruncNormal => Ok(trunc_normal_default(shape, rng)),
        InitKind::Spectral => spectral_init(shape, rng),
    }
}

/// Initialize per-channel depthwise kernels `[C, K, K]`; under spectral
/// init each channel's kernel is treated as a `K·K x 1` operator and
/// normalized on its own.
pub fn init_depthwise(kind: InitKind, channels: usize, k: usize, rng: &mut RngStream) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[channels, k, k]);
    for ch in 0..channels {
        let flat = match kind {
            InitKind::Xavier => xavier_init(&[k * k, 1], rng),
            InitKind::TruncNormal => trunc_normal_default(&[k * k, 1], rng),
            InitKind::Spectral => spectral_init(&[k * k, 1], rng)?,
        };
        out.data_mut()[ch * k * k..(ch + 1) * k * k].copy_from_slice(flat.data());
    }
    Ok(out)
}
