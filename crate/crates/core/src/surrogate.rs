//! Surrogate derivatives for the spike nonlinearity and the three scaling
//! conventions for how that derivative is attached to the graph.
//!
//! The spike forward is always H(M - V_thr) with H(0) = 1. The backward
//! replaces H' by a finite window f'(x). What differs between conventions is
//! the argument x handed to f' and whether the spike output is scaled:
//!
//! - `Absolute`: x = M - V_thr, output O = S.
//! - `Relative`: x = M / V_thr - 1, output O = S; the chain rule drags a
//!   1/V_thr factor into every backward pass through the node.
//! - `ThresholdInvariant`: x = M / V_thr - 1, output O = V_thr * S, so the
//!   1/V_thr from the argument and the V_thr on the output cancel and
//!   dO/dM depends only on the relative distance to threshold. Inference
//!   absorbs the output scale into the next layer's weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateShape {
    Rectangular,
    Triangular,
    Arctan,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    Absolute,
    Relative,
    ThresholdInvariant,
}

impl ScaleMode {
    pub fn label(self) -> &'static str {
        match self {
            ScaleMode::Absolute => "absolute",
            ScaleMode::Relative => "relative",
            ScaleMode::ThresholdInvariant => "threshold_invariant",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub shape: SurrogateShape,
    pub mode: ScaleMode,
    /// Window width. All shapes carry unit mass for any gamma > 0.
    pub gamma: f64,
}

impl SurrogateConfig {
    pub fn new(shape: SurrogateShape, mode: ScaleMode, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::invalid(
                "surrogate",
                format!("gamma must be finite and > 0, got {}", gamma),
            ));
        }
        Ok(SurrogateConfig { shape, mode, gamma })
    }
}

/// The window function f'(x).
///
/// Rectangular: 1/gamma on |x| < gamma/2, else 0 (strict at the boundary).
/// Triangular:  (1/gamma^2) * max(0, gamma - |x|).
/// Arctan:      gamma / (2 * (1 + ((pi/2) * gamma * x)^2)).
/// Sigmoid:     (1/gamma) * e^(x/gamma) / (1 + e^(x/gamma))^2.
pub fn sg_derivative<S: Scalar>(shape: SurrogateShape, x: S, gamma: S) -> S {
    let half = S::from_f64(0.5);
    match shape {
        SurrogateShape::Rectangular => {
            if x.abs() < gamma * half {
                gamma.recip()
            } else {
                S::zero()
            }
        }
        SurrogateShape::Triangular => {
            let t = gamma - x.abs();
            if t > S::zero() {
                t / (gamma * gamma)
            } else {
                S::zero()
            }
        }
        SurrogateShape::Arctan => {
            let a = S::from_f64(std::f64::consts::FRAC_PI_2) * gamma * x;
            gamma / (S::from_f64(2.0) * (S::one() + a * a))
        }
        SurrogateShape::Sigmoid => {
            // e^(x/g) / (1+e^(x/g))^2 == s * (1 - s) with s = sigmoid(x/g)
            let s = sigmoid(x / gamma);
            s * (S::one() - s) / gamma
        }
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// The argument handed to the window function.
pub fn sg_argument<S: Scalar>(mode: ScaleMode, m: S, vthr: S) -> S {
    match mode {
        ScaleMode::Absolute => m - vthr,
        ScaleMode::Relative | ScaleMode::ThresholdInvariant => m / vthr - S::one(),
    }
}

/// Spike forward: S = 1 iff M >= V_thr (equality fires).
pub fn heaviside<S: Scalar>(m: S, vthr: S) -> S {
    if m >= vthr {
        S::one()
    } else {
        S::zero()
    }
}

/// Multiplier the output scale contributes: V_thr under `ThresholdInvariant`,
/// 1 otherwise.
pub fn forward_scale<S: Scalar>(mode: ScaleMode, vthr: S) -> S {
    match mode {
        ScaleMode::ThresholdInvariant => vthr,
        _ => S::one(),
    }
}

/// d(layer output)/dM in closed form. For `ThresholdInvariant` the output is
/// O = V_thr * S and the V_thr cancels the 1/V_thr of the relative argument.
pub fn spike_grad_wrt_m<S: Scalar>(cfg: &SurrogateConfig, m: S, vthr: S) -> S {
    let gamma = S::from_f64(cfg.gamma);
    let x = sg_argument(cfg.mode, m, vthr);
    let f = sg_derivative(cfg.shape, x, gamma);
    match cfg.mode {
        ScaleMode::Absolute => f,
        ScaleMode::Relative => f / vthr,
        // Kept as the literal product vthr * (f'/vthr) rather than the
        // simplified f', so relative_grad * vthr reproduces this value
        // bit for bit. Algebraically identical; at most one ulp apart.
        ScaleMode::ThresholdInvariant => vthr * (f / vthr),
    }
}

/// d(layer output)/dV_thr in closed form.
///
/// Absolute:            -f'(M - V)
/// Relative:            f'(x) * (-M / V^2)
/// ThresholdInvariant:  S - (M / V) * f'(x)   (product rule on O = V * S,
///                      with the realized binary S in the first term)
pub fn spike_grad_wrt_vthr<S: Scalar>(cfg: &SurrogateConfig, m: S, vthr: S) -> S {
    let gamma = S::from_f64(cfg.gamma);
    let x = sg_argument(cfg.mode, m, vthr);
    let f = sg_derivative(cfg.shape, x, gamma);
    match cfg.mode {
        ScaleMode::Absolute => -f,
        ScaleMode::Relative => f * (-m / (vthr * vthr)),
        ScaleMode::ThresholdInvariant => {
            // product rule on O = V * S, same product form as the M-gradient
            let s = heaviside(m, vthr);
            s + vthr * (f * (-m / (vthr * vthr)))
        }
    }
}
