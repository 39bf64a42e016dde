//! Membrane-potential window initialization.
//!
//! Each spiking layer keeps a running scalar estimate mu of where active
//! neurons' potentials settle by the end of a window. Every window (training
//! and inference alike) starts from U[0] = mu instead of zero, which removes
//! most of the early-timestep distribution drift. Updates are training-only,
//! use detached values, and weight the incoming batch heavily:
//!
//!   mu <- (1 - beta) mu + beta mu_batch,   beta = 0.9 by default,
//!
//! where mu_batch averages U[T] over neurons that spiked at least once in
//! the window. A window with no active neurons leaves mu untouched and
//! increments a silence counter that diagnostics surface.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MpInitState {
    mu: f64,
    beta: f64,
    frozen: bool,
    silent_batches: u64,
    updates: u64,
}

impl MpInitState {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::invalid(
                "mpinit",
                format!("beta must be in (0, 1], got {}", beta),
            ));
        }
        Ok(MpInitState {
            mu: 0.0,
            beta,
            frozen: false,
            silent_batches: 0,
            updates: 0,
        })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn silent_batches(&self) -> u64 {
        self.silent_batches
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Restore a persisted state (checkpoint load).
    pub fn restore(mu: f64, beta: f64, frozen: bool, silent_batches: u64, updates: u64) -> Result<Self> {
        let mut s = MpInitState::new(beta)?;
        s.mu = mu;
        s.frozen = frozen;
        s.silent_batches = silent_batches;
        s.updates = updates;
        Ok(s)
    }

    /// U[0] for a fresh window: mu everywhere. Detached by construction, the
    /// caller records it as a plain leaf.
    pub fn init_window<S: Scalar>(&self, shape: &[usize]) -> Tensor<S> {
        Tensor::full(shape, S::from_f64(self.mu))
    }

    /// Mean of final potentials over active neurons; None when none fired.
    pub fn batch_mean_active<S: Scalar>(u_final: &Tensor<S>, active: &[bool]) -> Result<Option<f64>> {
        if u_final.len() != active.len() {
            return Err(Error::shape(
                "mpinit_update",
                format!("mask len {} vs U[T] len {}", active.len(), u_final.len()),
            ));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (v, &a) in u_final.data().iter().zip(active) {
            if a {
                let v = v.as_f64();
                if !v.is_finite() {
                    return Err(Error::invalid(
                        "mpinit_update",
                        "non-finite U[T] entry (diverged window)",
                    ));
                }
                sum += v;
                count += 1;
            }
        }
        Ok(if count == 0 { None } else { Some(sum / count as f64) })
    }

    /// Training-side EMA step from one window's detached results.
    pub fn update<S: Scalar>(&mut self, u_final: &Tensor<S>, active: &[bool]) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(
                "mpinit update on frozen state (inference-converted network)".into(),
            ));
        }
        match Self::batch_mean_active(u_final, active)? {
            Some(batch_mu) => {
                self.mu = (1.0 - self.beta) * self.mu + self.beta * batch_mu;
                self.updates += 1;
            }
            None => {
                self.silent_batches += 1;
            }
        }
        Ok(())
    }
}
