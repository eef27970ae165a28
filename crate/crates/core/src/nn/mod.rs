//! Minimal dense-network engine: forward/backward passes, Adam, and checkpoints.

mod adam;
mod checkpoint;
mod mlp;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{read_checkpoint, read_checkpoint_lines, write_checkpoint};
pub use mlp::{Activation, Gradients, Layer, Mlp, Trace};

/// Squared-error loss `0.5 * Σ w_ij (y_ij - t_ij)²` restricted by `weights`,
/// together with its gradient with respect to `y`.
pub fn masked_squared_error(
    output: &nalgebra::DMatrix<f64>,
    target: &nalgebra::DMatrix<f64>,
    weights: &nalgebra::DMatrix<f64>,
) -> (f64, nalgebra::DMatrix<f64>) {
    let mut grad = output - target;
    grad.component_mul_assign(weights);
    let loss = 0.5 * grad.zip_map(&(output - target), |g, d| g * d).sum();
    (loss, grad)
}
