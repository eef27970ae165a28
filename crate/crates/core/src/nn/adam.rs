use crate::error::{ImputeError, Result};

use super::mlp::{Gradients, Mlp};

/// Adam moment accumulators for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        AdamState {
            step_count: 0,
            first_moment: Gradients::zeros_like(net),
            second_moment: Gradients::zeros_like(net),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }
}

/// One bias-corrected Adam descent step on `net` along `grads`.
///
/// Gradients are validated before any parameter is touched, so a rejected
/// step leaves both the network and the state unchanged.
pub fn adam_step(net: &mut Mlp, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if !grads.same_shape(net) || !state.first_moment.same_shape(net) || !state.second_moment.same_shape(net) {
        return Err(ImputeError::shape(
            "adam step",
            format!("{:?}", net.layer_sizes()),
            "mismatched gradient or accumulator shapes",
        ));
    }
    for (i, (w, b)) in grads.weights.iter().zip(&grads.biases).enumerate() {
        if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(ImputeError::numeric(format!("gradient of layer {i}")));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (state.learning_rate, state.epsilon);

    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        let m = &mut state.first_moment.weights[i];
        let v = &mut state.second_moment.weights[i];
        for (k, p) in layer.weights.iter_mut().enumerate() {
            update(p, grads.weights[i][k], &mut m[k], &mut v[k]);
        }
        let m = &mut state.first_moment.biases[i];
        let v = &mut state.second_moment.biases[i];
        for (k, p) in layer.biases.iter_mut().enumerate() {
            update(p, grads.biases[i][k], &mut m[k], &mut v[k]);
        }
    }
    Ok(())
}
