use crate::error::{Error, Result};
use crate::model::OptimizerState;
use crate::nn::ParamSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut ParamSet<f32>,
    grads: &ParamSet<f32>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !params.same_layout(grads) {
        return Err(Error::invalid("gradient layout does not match parameters"));
    }
    if state.first_moment.is_empty() {
        *state = OptimizerState::for_params(params);
    }
    if !state.first_moment.same_layout(params) || !state.second_moment.same_layout(params) {
        return Err(Error::invalid("optimizer state does not match parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
    for (((p, g), m), v) in params
        .arrays
        .iter_mut()
        .zip(&grads.arrays)
        .zip(&mut state.first_moment.arrays)
        .zip(&mut state.second_moment.arrays)
    {
        for (((p, &g), m), v) in p
            .data
            .iter_mut()
            .zip(&g.data)
            .zip(&mut m.data)
            .zip(&mut v.data)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m as f64 / c1;
            let v_hat = *v as f64 / c2;
            let update = lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            *p -= update as f32;
        }
    }
    Ok(())
}

/// `lr₀ · factor^⌊epoch / decay_epochs⌋`.
pub fn learning_rate(lr0: f64, decay_factor: f64, decay_epochs: u64, epoch: u64) -> f64 {
    lr0 * decay_factor.powi((epoch / decay_epochs.max(1)) as i32)
}
