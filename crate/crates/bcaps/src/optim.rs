//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter, in the model's canonical
/// parameter order, plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[&Tensor<S>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One Adam update over all parameters. The step is atomic: every gradient
/// is validated finite before any parameter or moment is touched, so a bad
/// batch can be reported without corrupting the state.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[&Tensor<S>],
    names: &[&str],
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != names.len()
        || params.len() != state.m.len()
    {
        return Err(Error::Contract(format!(
            "adam_step arity mismatch: {} params, {} grads, {} names, {} moments",
            params.len(),
            grads.len(),
            names.len(),
            state.m.len()
        )));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGrad {
                param: name.to_string(),
            });
        }
    }

    state.t += 1;
    let b1 = S::from_f64(BETA1);
    let b2 = S::from_f64(BETA2);
    let one = S::one();
    let lr = S::from_f64(lr);
    let eps = S::from_f64(ADAM_EPS);
    let bc1 = one - b1.powi(state.t as i32);
    let bc2 = one - b2.powi(state.t as i32);

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for ((pe, &ge), (me, ve)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *me = b1 * *me + (one - b1) * ge;
            *ve = b2 * *ve + (one - b2) * ge * ge;
            let mhat = *me / bc1;
            let vhat = *ve / bc2;
            *pe = *pe - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
