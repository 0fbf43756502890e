//! Small reverse-mode differentiation engine over dense 64-bit tensors.
//!
//! Values are recorded eagerly on a [`Graph`]; [`Graph::backward`] replays the
//! record in reverse. Parameters live in a [`ParamStore`] and are bound into a
//! graph as its first nodes, so a [`ParamId`] doubles as the parameter's
//! [`NodeId`] in any graph built with [`ParamStore::bind`].

mod checkpoint;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry};
pub use graph::{Graph, NodeId, RowMix};
pub use optim::{AdamWConfig, OptimizerState, StepDecay};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Compare the analytic gradient of `param` against central differences.
///
/// `build` records the loss given the parameter node. Returns
/// `max |analytic − numeric| / max(1, |analytic|)` over all coordinates.
pub fn finite_diff_check<F>(param: &Tensor, step: f64, build: F) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, AutodiffError>,
{
    let mut g = Graph::new();
    let p = g.leaf(param.clone().with_grad());
    let loss = build(&mut g, p)?;
    g.backward(loss)?;
    let analytic = g.grad(p).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; param.len()]);

    let eval = |t: Tensor| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let p = g.constant(t);
        let l = build(&mut g, p)?;
        Ok(g.value(l).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..param.len() {
        let mut plus = param.clone();
        plus.data_mut()[i] += step;
        let mut minus = param.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
