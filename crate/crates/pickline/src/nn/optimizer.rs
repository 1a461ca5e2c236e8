use super::network::{LayerParams, Network};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Plain gradient descent whose step size shrinks multiplicatively via
    /// [`decay_step_size`].
    SgdDecaying,
    Adam,
}

/// Optimizer state: step size, decay schedule and (for Adam) per-parameter
/// moment accumulators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub alpha: f64,
    pub decay_factor: f64,
    pub alpha_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    /// First/second moments, flat in checkpoint parameter order; empty for SGD.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn adam(alpha: f64, param_count: usize) -> Self {
        OptimizerState {
            kind: OptimizerKind::Adam,
            alpha,
            decay_factor: 0.0,
            alpha_floor: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn sgd_decaying(alpha: f64, decay_factor: f64, alpha_floor: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::SgdDecaying,
            alpha,
            decay_factor,
            alpha_floor,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

fn for_each_scalar(params: &mut Network, grads: &[LayerParams], mut f: impl FnMut(usize, &mut f64, f64)) -> Result<()> {
    let mut idx = 0;
    for (layer, glayer) in params.params_mut().iter_mut().zip(grads) {
        let gblocks = glayer.blocks();
        let pblocks = layer.blocks_mut();
        if pblocks.len() != gblocks.len() {
            return Err(Error::Dimension("gradient layout does not match parameters".into()));
        }
        for (pb, gb) in pblocks.into_iter().zip(gblocks) {
            if pb.len() != gb.len() {
                return Err(Error::Dimension("gradient block size mismatch".into()));
            }
            for (p, &g) in pb.iter_mut().zip(gb) {
                f(idx, p, g);
                idx += 1;
            }
        }
    }
    Ok(())
}

/// One Adam step with bias-corrected moment estimates.
pub fn adam_update(net: &mut Network, grads: &[LayerParams], state: &mut OptimizerState) -> Result<()> {
    if state.kind != OptimizerKind::Adam {
        return Err(Error::Protocol("adam_update on a non-Adam optimizer".into()));
    }
    let count = net.param_count();
    if state.m.len() != count {
        return Err(Error::Dimension(format!("moment buffers sized {} for {count} parameters", state.m.len())));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2, eps, alpha) = (state.beta1, state.beta2, state.epsilon, state.alpha);
    let (m, v) = (&mut state.m, &mut state.v);
    for_each_scalar(net, grads, |i, p, g| {
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *p -= alpha * m_hat / (v_hat.sqrt() + eps);
    })
}

/// One plain gradient-descent step at the current step size.
pub fn sgd_update(net: &mut Network, grads: &[LayerParams], state: &mut OptimizerState) -> Result<()> {
    if state.kind != OptimizerKind::SgdDecaying {
        return Err(Error::Protocol("sgd_update on a non-SGD optimizer".into()));
    }
    state.step += 1;
    let alpha = state.alpha;
    for_each_scalar(net, grads, |_, p, g| *p -= alpha * g)
}

/// Shrinks the SGD step size by its decay factor, clamped at the floor:
/// alpha <- max(alpha * (1 - decay_factor), alpha_floor).
pub fn decay_step_size(state: &mut OptimizerState) -> Result<()> {
    if state.kind != OptimizerKind::SgdDecaying {
        return Err(Error::Protocol("decay_step_size on a non-SGD optimizer".into()));
    }
    state.alpha = (state.alpha * (1.0 - state.decay_factor)).max(state.alpha_floor);
    Ok(())
}
