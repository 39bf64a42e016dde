//! Leaky integrate-and-fire dynamics in discrete time.
//!
//! One step, given previous potential U and layer input current I:
//!
//!   M = (1 - 1/tau) U + (1/tau) I      leak + explicitly scaled integration
//!   S = H(M - V_thr), H(0) = 1         fire
//!   U' = M - V_thr S   (soft)          reset
//!   U' = M (1 - S)     (hard)
//!
//! tau and V_thr are per-layer scalars trained through reparameterizations
//! that keep them in range for any raw value: tau = 1/sigmoid(w_raw) in
//! (1, inf), V_thr = softplus(k_raw) in (0, inf).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surrogate::{sg_argument, ScaleMode, SurrogateConfig};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    Soft,
    Hard,
}

impl ResetMode {
    pub fn label(self) -> &'static str {
        match self {
            ResetMode::Soft => "soft",
            ResetMode::Hard => "hard",
        }
    }
}

pub fn tau_from_raw<S: Scalar>(w_raw: S) -> S {
    // 1 / sigmoid(w) == 1 + exp(-w). For very large w the sum rounds to 1.0,
    // which would escape the open interval; pin it one epsilon above.
    let tau = S::one() + (-w_raw).exp();
    tau.max(S::one() + S::epsilon())
}

pub fn vthr_from_raw<S: Scalar>(k_raw: S) -> S {
    // softplus, stable on both tails. Far-negative k underflows the exp to
    // exactly 0, which would let a runaway optimizer step push the threshold
    // out of its open domain; pin it one epsilon above, like tau at its wall.
    // The true gradient there is ~e^k, indistinguishable from 0 anyway.
    let zero = S::zero();
    let mag = if k_raw > zero { k_raw } else { -k_raw };
    let sp = k_raw.max(zero) + (-mag).exp().ln_1p();
    sp.max(S::epsilon())
}

/// Inverse of `tau_from_raw`; requires tau > 1.
pub fn raw_from_tau(tau: f64) -> Result<f64> {
    if !(tau > 1.0) || !tau.is_finite() {
        return Err(Error::invalid(
            "raw_from_tau",
            format!("tau must be finite and > 1, got {}", tau),
        ));
    }
    Ok(-(tau - 1.0).ln())
}

/// Inverse of `vthr_from_raw`; requires vthr > 0.
pub fn raw_from_vthr(vthr: f64) -> Result<f64> {
    if !(vthr > 0.0) || !vthr.is_finite() {
        return Err(Error::invalid(
            "raw_from_vthr",
            format!("vthr must be finite and > 0, got {}", vthr),
        ));
    }
    // ln(e^v - 1) = v + ln(1 - e^-v), stable for large v
    Ok(vthr + (-(-vthr).exp()).ln_1p())
}

/// Tape-free single-neuron step: M = (1 - 1/tau) u + (1/tau) i, spike at
/// M >= vthr, then reset. Returns (membrane, spike, next state).
pub fn scalar_step(u: f64, i: f64, tau: f64, vthr: f64, reset: ResetMode) -> (f64, f64, f64) {
    let leak = 1.0 / tau;
    let m = (1.0 - leak) * u + leak * i;
    let s = if m >= vthr { 1.0 } else { 0.0 };
    let next = match reset {
        ResetMode::Soft => m - vthr * s,
        ResetMode::Hard => m * (1.0 - s),
    };
    (m, s, next)
}

/// Per-layer neuron parameters in raw (unconstrained) form.
#[derive(Clone, Debug)]
pub struct LifParams<S> {
    pub w_raw: Tensor<S>,
    pub k_raw: Tensor<S>,
    pub reset: ResetMode,
    pub train_tau: bool,
    pub train_vthr: bool,
}

impl<S: Scalar> LifParams<S> {
    pub fn from_tau_vthr(
        tau: f64,
        vthr: f64,
        reset: ResetMode,
        train_tau: bool,
        train_vthr: bool,
    ) -> Result<Self> {
        Ok(LifParams {
            w_raw: Tensor::scalar_tensor(S::from_f64(raw_from_tau(tau)?)),
            k_raw: Tensor::scalar_tensor(S::from_f64(raw_from_vthr(vthr)?)),
            reset,
            train_tau,
            train_vthr,
        })
    }

    pub fn tau(&self) -> S {
        tau_from_raw(self.w_raw.scalar_value())
    }

    pub fn vthr(&self) -> S {
        vthr_from_raw(self.k_raw.scalar_value())
    }
}

/// Tape handles for one layer's neuron scalars within a window.
#[derive(Clone, Copy, Debug)]
pub struct LifNodes {
    pub w_raw: NodeId,
    pub k_raw: NodeId,
    pub tau: NodeId,
    pub vthr: NodeId,
}

pub fn register<S: Scalar>(tape: &mut Tape<S>, params: &LifParams<S>) -> Result<LifNodes> {
    let w_raw = tape.leaf(params.w_raw.clone());
    let k_raw = tape.leaf(params.k_raw.clone());
    let tau = tape.reparam_tau(w_raw)?;
    let vthr = tape.reparam_vthr(k_raw)?;
    Ok(LifNodes {
        w_raw,
        k_raw,
        tau,
        vthr,
    })
}

/// Everything one step produces. `out` is what feeds the next layer: the
/// binary spikes, scaled by V_thr under `ThresholdInvariant`.
#[derive(Debug)]
pub struct StepOut<S> {
    pub m: NodeId,
    pub spikes_node: NodeId,
    pub out: NodeId,
    pub u_next: NodeId,
    /// Binary spike values (forward result, detached copy).
    pub spikes: Tensor<S>,
    /// Surrogate arguments realized this step, for gradient-health metrics.
    pub sg_args: Tensor<S>,
}

/// One integrate/fire/reset step on the tape. `layer` and `timestep` only
/// feed the divergence error.
pub fn step<S: Scalar>(
    tape: &mut Tape<S>,
    nodes: &LifNodes,
    u_prev: NodeId,
    i_in: NodeId,
    reset: ResetMode,
    sg: &SurrogateConfig,
    layer: &str,
    timestep: usize,
) -> Result<StepOut<S>> {
    let m = tape.membrane_update(u_prev, i_in, nodes.tau)?;
    if !tape.value(m).all_finite() {
        return Err(Error::Divergence {
            what: "membrane",
            layer: layer.to_string(),
            timestep,
        });
    }
    let spikes_node = tape.spike(m, nodes.vthr, sg)?;
    let spikes = tape.value(spikes_node).clone();
    let vthr = tape.value(nodes.vthr).scalar_value();
    let sg_args = tape.value(m).map(|mv| sg_argument(sg.mode, mv, vthr));
    let out = match sg.mode {
        ScaleMode::ThresholdInvariant => tape.mul(nodes.vthr, spikes_node)?,
        _ => spikes_node,
    };
    let u_next = match reset {
        ResetMode::Soft => tape.reset_soft(m, nodes.vthr, &spikes)?,
        ResetMode::Hard => tape.reset_hard(m, &spikes)?,
    };
    Ok(StepOut {
        m,
        spikes_node,
        out,
        u_next,
        spikes,
        sg_args,
    })
}
