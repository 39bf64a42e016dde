//! Central-difference gradient checking against the tape's reverse pass.
//! Used throughout the test suites; exposed because it is generally useful
//! when extending the op set.

use crate::error::Result;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Builds the graph from leaf tensors and returns the scalar loss node.
pub trait BuildFn: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> {}
impl<F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>> BuildFn for F {}

fn eval(build: &impl BuildFn, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids).expect("graph construction");
    tape.value(loss).scalar_value()
}

/// Maximum error over every entry of every input, where error is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn max_grad_error(inputs: &[Tensor<f64>], eps: f64, build: impl BuildFn) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids).expect("graph construction");
    tape.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (slot, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(ids[slot])
            .map(|g| g.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        for entry in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[slot].data_mut()[entry] += eps;
            let mut minus = inputs.to_vec();
            minus[slot].data_mut()[entry] -= eps;
            let numeric = (eval(&build, &plus) - eval(&build, &minus)) / (2.0 * eps);
            let a = analytic[entry];
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            let err = (a - numeric).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// Panics when the worst relative error exceeds `tol`.
pub fn check_grads(inputs: &[Tensor<f64>], eps: f64, tol: f64, build: impl BuildFn) {
    let worst = max_grad_error(inputs, eps, build);
    assert!(
        worst <= tol,
        "gradient check failed: max relative error {:.3e} > {:.1e}",
        worst,
        tol
    );
}
