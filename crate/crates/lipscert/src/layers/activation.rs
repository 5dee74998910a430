//! Elementwise activations and their Lipschitz constants.
//!
//! GELU uses the sigmoid approximation `x·σ(1.702x)`, whose maximum slope
//! is 1.0998; sigmoid, tanh, and ReLU have constants 1/4, 1, and 1.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActKind {
    Sigmoid,
    Tanh,
    Relu,
    Gelu,
}

impl ActKind {
    pub fn name(self) -> &'static str {
        match self {
            ActKind::Sigmoid => "sigmoid",
            ActKind::Tanh => "tanh",
            ActKind::Relu => "relu",
            ActKind::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sigmoid" => Some(ActKind::Sigmoid),
            "tanh" => Some(ActKind::Tanh),
            "relu" => Some(ActKind::Relu),
            "gelu" => Some(ActKind::Gelu),
            _ => None,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn apply_scalar(kind: ActKind, x: f64) -> f64 {
    match kind {
        ActKind::Sigmoid => sigmoid(x),
        ActKind::Tanh => x.tanh(),
        ActKind::Relu => x.max(0.0),
        ActKind::Gelu => x * sigmoid(1.702 * x),
    }
}

pub fn derivative_scalar(kind: ActKind, x: f64) -> f64 {
    match kind {
        ActKind::Sigmoid => {
            let s = sigmoid(x);
            s * (1.0 - s)
        }
        ActKind::Tanh => {
            let t = x.tanh();
            1.0 - t * t
        }
        ActKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        ActKind::Gelu => {
            let s = sigmoid(1.702 * x);
            s + 1.702 * x * s * (1.0 - s)
        }
    }
}

/// Elementwise application over a tensor.
pub fn activation(kind: ActKind, x: &Tensor) -> Tensor {
    x.map(|v| apply_scalar(kind, v))
}

/// Elementwise derivative over a tensor.
pub fn activation_derivative(kind: ActKind, x: &Tensor) -> Tensor {
    x.map(|v| derivative_scalar(kind, v))
}

/// Lipschitz constant of the activation: the maximum absolute slope.
pub fn activation_lipschitz(kind: ActKind) -> f64 {
    match kind {
        ActKind::Sigmoid => 0.25,
        ActKind::Tanh => 1.0,
        ActKind::Relu => 1.0,
        // Maximum slope of x·σ(1.702x), attained near x ≈ 1.41.
        ActKind::Gelu => 1.0998,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        assert_eq!(apply_scalar(ActKind::Relu, -2.0), 0.0);
        assert_eq!(apply_scalar(ActKind::Relu, 3.0), 3.0);
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(apply_scalar(ActKind::Sigmoid, 0.0), 0.5);
    }

    #[test]
    fn constants_table() {
        assert_eq!(activation_lipschitz(ActKind::Sigmoid), 0.25);
        assert_eq!(activation_lipschitz(ActKind::Tanh), 1.0);
        assert_eq!(activation_lipschitz(ActKind::Relu), 1.0);
        assert_eq!(activation_lipschitz(ActKind::Gelu), 1.0998);
    }

    #[test]
    fn gelu_max_slope_matches_constant() {
        // Dense grid search over [-10, 10].
        let mut max_slope = 0.0f64;
        let step = 1e-4;
        let n = (20.0 / step) as usize;
        for i in 0..=n {
            let x = -10.0 + i as f64 * step;
            max_slope = max_slope.max(derivative_scalar(ActKind::Gelu, x).abs());
        }
        assert!(
            (max_slope - 1.0998).abs() <= 1e-3,
            "grid max slope {max_slope}"
        );
    }

    #[test]
    fn empirical_slope_never_exceeds_constant() {
        for &kind in &[ActKind::Sigmoid, ActKind::Tanh, ActKind::Relu, ActKind::Gelu] {
            let lip = activation_lipschitz(kind);
            let step = 1e-3;
            let n = (20.0 / step) as usize;
            for i in 0..=n {
                let x = -10.0 + i as f64 * step;
                let d = derivative_scalar(kind, x).abs();
                assert!(d <= lip + 1e-3, "{}: slope {d} at {x}", kind.name());
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for &kind in &[ActKind::Sigmoid, ActKind::Tanh, ActKind::Gelu] {
            for i in -30..=30 {
                let x = i as f64 * 0.3;
                let fd = (apply_scalar(kind, x + h) - apply_scalar(kind, x - h)) / (2.0 * h);
                let an = derivative_scalar(kind, x);
                assert!((fd - an).abs() <= 1e-6, "{} at {x}", kind.name());
            }
        }
    }
}
