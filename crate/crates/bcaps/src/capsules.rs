//! Fully connected capsule layers with dynamic routing.
//!
//! Routing is iterative control flow, not part of the differentiated graph:
//! the loop below runs on plain tensors, and only the final couplings enter
//! the tape as a constant of the weighted sum. Gradients therefore flow
//! through predictions, the final k·û sum, and the squash, which is the same
//! function the finite-difference oracle sees when it reuses frozen
//! couplings.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{softmax_tensor, Graph, VarId, NORM_EPS};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Running statistics update: new = momentum·old + (1−momentum)·batch.
pub const BN_MOMENTUM: f64 = 0.9;
/// Capsule-layer weight init: zero-mean Gaussian, std 0.05.
pub const W_INIT_STD: f64 = 0.05;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Transformation weights W[i][j] from child capsules to parent capsules.
#[derive(Clone, Debug)]
pub struct FcCapsuleLayer<S> {
    pub num_in: usize,
    pub in_dim: usize,
    pub num_out: usize,
    pub out_dim: usize,
    pub routing_iters: usize,
    /// [num_in, num_out, in_dim, out_dim]
    pub w: Tensor<S>,
}

/// Routing logits and the couplings they induce, both [batch, num_in, num_out].
#[derive(Clone, Debug)]
pub struct RoutingState<S> {
    pub logits: Tensor<S>,
    pub couplings: Tensor<S>,
}

impl<S: Scalar> FcCapsuleLayer<S> {
    pub fn init<R: Rng>(
        num_in: usize,
        in_dim: usize,
        num_out: usize,
        out_dim: usize,
        routing_iters: usize,
        rng: &mut R,
    ) -> Self {
        FcCapsuleLayer {
            num_in,
            in_dim,
            num_out,
            out_dim,
            routing_iters,
            w: Tensor::randn(&[num_in, num_out, in_dim, out_dim], W_INIT_STD, rng),
        }
    }

    pub fn param_count(&self) -> u64 {
        (self.num_in * self.num_out * self.in_dim * self.out_dim) as u64
    }

    /// Predictions followed by routing. `w` is this layer's weight tensor
    /// staged on the graph; `frozen` bypasses the routing loop with
    /// pre-recorded couplings (gradient checking only).
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        w: VarId,
        u: VarId,
        frozen: Option<&Tensor<S>>,
    ) -> Result<(VarId, RoutingState<S>)> {
        let uhat = predict(g, u, w)?;
        route(g, uhat, self.routing_iters, frozen)
    }
}

/// û[b,i,j,:] = u[b,i,:]·W[i,j,:,:].
pub fn predict<S: Scalar>(g: &mut Graph<S>, u: VarId, w: VarId) -> Result<VarId> {
    g.caps_predict(u, w)
}

/// Dynamic routing over û [batch, num_in, num_out, out_dim]. Starts from
/// zero logits; each iteration couples with softmax over parents, forms the
/// weighted parent sums, squashes, and adds the û·v agreement to the logits
/// (skipped after the final iteration). Returns the squashed parent capsules
/// v [batch, num_out, out_dim] and the final routing state.
pub fn route<S: Scalar>(
    g: &mut Graph<S>,
    uhat: VarId,
    iters: usize,
    frozen: Option<&Tensor<S>>,
) -> Result<(VarId, RoutingState<S>)> {
    if iters < 1 {
        return Err(Error::Contract(format!(
            "routing needs at least 1 iteration, got {iters}"
        )));
    }
    let shape = g.value(uhat).shape().to_vec();
    let (batch, ni, nj, dj) = (shape[0], shape[1], shape[2], shape[3]);
    let kshape = [batch, ni, nj];

    let state = if let Some(k) = frozen {
        RoutingState {
            logits: Tensor::zeros(&kshape),
            couplings: k.clone(),
        }
    } else {
        let uhat_val = g.value(uhat).clone();
        let mut logits = Tensor::<S>::zeros(&kshape);
        let mut couplings = softmax_tensor(&logits, 2);
        for it in 0..iters {
            couplings = softmax_tensor(&logits, 2);
            if it + 1 == iters {
                break;
            }
            let mut s = vec![S::zero(); batch * nj * dj];
            kernels::route_sum(batch, ni, nj, dj, couplings.data(), uhat_val.data(), &mut s);
            let v = squash_tensor_flat(&s, dj);
            // Agreement update: b_ij += û_{j|i}·v_j.
            let bdata = logits.data_mut();
            for b in 0..batch {
                for i in 0..ni {
                    for j in 0..nj {
                        let urow = &uhat_val.data()
                            [((b * ni + i) * nj + j) * dj..((b * ni + i) * nj + j + 1) * dj];
                        let vrow = &v[(b * nj + j) * dj..(b * nj + j + 1) * dj];
                        let agree = urow
                            .iter()
                            .zip(vrow)
                            .fold(S::zero(), |acc, (&uv, &vv)| acc + uv * vv);
                        bdata[(b * ni + i) * nj + j] = bdata[(b * ni + i) * nj + j] + agree;
                    }
                }
            }
        }
        RoutingState {
            logits,
            couplings,
        }
    };

    let s = g.route_sum(uhat, state.couplings.clone())?;
    let v = g.squash(s)?;
    Ok((v, state))
}

/// Squashing on the graph (see [`Graph::squash`]).
pub fn squash<S: Scalar>(g: &mut Graph<S>, s: VarId) -> Result<VarId> {
    g.squash(s)
}

/// Squash on a plain tensor, for the detached routing loop. Same formula as
/// the graph op.
pub fn squash_tensor<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let dim = *t.shape().last().expect("squash input has rank >= 1");
    let out = squash_tensor_flat(t.data(), dim);
    Tensor::new(t.shape(), out).expect("squash preserves shape")
}

fn squash_tensor_flat<S: Scalar>(data: &[S], dim: usize) -> Vec<S> {
    let eps = S::from_f64(NORM_EPS);
    let mut out = vec![S::zero(); data.len()];
    for (sv, ov) in data.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let q = sv.iter().fold(S::zero(), |acc, &v| acc + v * v);
        let r = (q + eps).sqrt();
        let coef = q / (S::one() + q) / r;
        for (o, &v) in ov.iter_mut().zip(sv) {
            *o = coef * v;
        }
    }
    out
}

/// Per-capsule Euclidean norm [batch, num_caps, dim] → [batch, num_caps],
/// stabilized so the gradient is finite at the zero capsule.
pub fn caps_norm<S: Scalar>(g: &mut Graph<S>, u: VarId) -> Result<VarId> {
    g.norm_last(u)
}

/// Batch-norm parameters plus running statistics for one set of channels.
/// `shape` is the channel shape ([features] for flat inputs, [caps, dim] for
/// capsule inputs); statistics are tracked per channel over the batch.
#[derive(Clone, Debug)]
pub struct BatchNorm<S> {
    pub scale: Tensor<S>,
    pub shift: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
}

/// Detached per-channel batch statistics from one train-mode forward.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channel_shape: &[usize]) -> Self {
        BatchNorm {
            scale: Tensor::filled(channel_shape, S::one()),
            shift: Tensor::zeros(channel_shape),
            running_mean: Tensor::zeros(channel_shape),
            running_var: Tensor::filled(channel_shape, S::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats<S>) {
        let m = S::from_f64(BN_MOMENTUM);
        let c = S::one() - m;
        for (r, &b) in self
            .running_mean
            .data_mut()
            .iter_mut()
            .zip(stats.mean.data())
        {
            *r = m * *r + c * b;
        }
        for (r, &b) in self
            .running_var
            .data_mut()
            .iter_mut()
            .zip(stats.var.data())
        {
            *r = m * *r + c * b;
        }
    }
}

/// Composed batch normalization over the leading (batch) axis of x [B, F].
/// Train mode normalizes with the batch's population statistics and returns
/// them (detached) for the caller to fold into the running estimates; eval
/// mode normalizes with the running statistics. `scale`/`shift` are the
/// staged per-channel parameters, flattened to [F].
pub fn batchnorm_forward<S: Scalar>(
    g: &mut Graph<S>,
    x: VarId,
    scale: VarId,
    shift: VarId,
    running: (&Tensor<S>, &Tensor<S>),
    mode: Mode,
) -> Result<(VarId, Option<BatchStats<S>>)> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: shape,
            rhs: vec![0, 0],
        });
    }
    let (batch, features) = (shape[0], shape[1]);
    let eps = S::from_f64(BN_EPS);

    let (mean, var, stats) = match mode {
        Mode::Train => {
            if batch < 2 {
                return Err(Error::Contract(format!(
                    "batch norm needs batch >= 2 in train mode, got {batch}"
                )));
            }
            let mean = g.mean_axis(x, 0)?;
            let mean_b = g.broadcast_prepend(mean, batch);
            let centered = g.sub(x, mean_b)?;
            let sq = g.square(centered);
            let var = g.mean_axis(sq, 0)?;
            let stats = BatchStats {
                mean: g.value(mean).clone(),
                var: g.value(var).clone(),
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => {
            let mean = g.constant(running.0.reshape(&[features])?);
            let var = g.constant(running.1.reshape(&[features])?);
            (mean, var, None)
        }
    };

    let mean_b = g.broadcast_prepend(mean, batch);
    let centered = g.sub(x, mean_b)?;
    let var_eps = g.add_scalar(var, eps);
    let std = g.sqrt(var_eps)?;
    let std_b = g.broadcast_prepend(std, batch);
    let normed = g.div(centered, std_b)?;
    let scale_b = g.broadcast_prepend(scale, batch);
    let shift_b = g.broadcast_prepend(shift, batch);
    let scaled = g.mul(normed, scale_b)?;
    let y = g.add(scaled, shift_b)?;
    Ok((y, stats))
}

/// Batch norm along the description dimension of capsules u [B, C, D]: each
/// (capsule, coordinate) channel is normalized over the batch. `scale` and
/// `shift` are staged [C, D] parameters.
pub fn caps_batchnorm<S: Scalar>(
    g: &mut Graph<S>,
    u: VarId,
    scale: VarId,
    shift: VarId,
    running: (&Tensor<S>, &Tensor<S>),
    mode: Mode,
) -> Result<(VarId, Option<BatchStats<S>>)> {
    let shape = g.value(u).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "caps_batchnorm",
            lhs: shape,
            rhs: vec![0, 0, 0],
        });
    }
    let (batch, caps, dim) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(u, &[batch, caps * dim])?;
    let scale_f = g.reshape(scale, &[caps * dim])?;
    let shift_f = g.reshape(shift, &[caps * dim])?;
    let (y, stats) = batchnorm_forward(g, flat, scale_f, shift_f, running, mode)?;
    let y = g.reshape(y, &[batch, caps, dim])?;
    Ok((y, stats))
}
