//! The capsule encoder, the fully connected baseline, the shared decoder,
//! latent sampling, and the loss terms.
//!
//! Both models expose the same staged-forward shape: parameters enter the
//! graph in the canonical `param_names` order, the forward returns the head,
//! sample, and reconstruction ids plus everything the caller needs to fold
//! batch-norm statistics and to replay the forward with frozen routing and
//! frozen noise (the form finite differences can check).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsules::{
    batchnorm_forward, caps_batchnorm, BatchNorm, BatchStats, FcCapsuleLayer, Mode, RoutingState,
    W_INIT_STD,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_INPUT_DIM: usize = 784;
pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_OUT_CAPS_DIM: usize = 64;
pub const DEFAULT_ROUTING_ITERS: usize = 3;

/// How the reparameterization noise ε is drawn. In every variant ε is a
/// constant of the graph; gradients flow through μ and σ only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// ε ~ N(0, 1)
    StandardNormal,
    /// ε ~ N(0.5, 0.5)
    ShiftedNormal,
    /// ε ~ N(μ[b,l], σ[b,l]), per element; needs σ ≥ 0
    DataDriven,
}

impl SamplingStrategy {
    pub fn name(self) -> &'static str {
        match self {
            SamplingStrategy::StandardNormal => "standard_normal",
            SamplingStrategy::ShiftedNormal => "shifted_normal",
            SamplingStrategy::DataDriven => "data_driven",
        }
    }
}

impl std::fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "standard_normal" => Ok(SamplingStrategy::StandardNormal),
            "shifted_normal" => Ok(SamplingStrategy::ShiftedNormal),
            "data_driven" => Ok(SamplingStrategy::DataDriven),
            other => Err(Error::Contract(format!(
                "unknown sampling strategy '{other}' (expected standard_normal, shifted_normal, or data_driven)"
            ))),
        }
    }
}

fn default_input_dim() -> usize {
    DEFAULT_INPUT_DIM
}
fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}
fn default_out_caps_dim() -> usize {
    DEFAULT_OUT_CAPS_DIM
}
fn default_routing_iters() -> usize {
    DEFAULT_ROUTING_ITERS
}
fn default_true() -> bool {
    true
}
fn default_standard() -> SamplingStrategy {
    SamplingStrategy::StandardNormal
}
fn default_data_driven() -> SamplingStrategy {
    SamplingStrategy::DataDriven
}

/// Capsule encoder shape {{C, D}, {L, D1}} plus the shared decoder width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BCapsConfig {
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    pub c: usize,
    pub d: usize,
    pub l: usize,
    #[serde(default = "default_out_caps_dim")]
    pub d1: usize,
    #[serde(default = "default_routing_iters")]
    pub routing_iters: usize,
    #[serde(default = "default_true")]
    pub use_capsule_batchnorm: bool,
    #[serde(default = "default_hidden")]
    pub dec_hidden: usize,
    #[serde(default = "default_data_driven")]
    pub sampling: SamplingStrategy,
}

impl BCapsConfig {
    pub fn new(c: usize, d: usize, l: usize) -> Self {
        BCapsConfig {
            input_dim: DEFAULT_INPUT_DIM,
            c,
            d,
            l,
            d1: DEFAULT_OUT_CAPS_DIM,
            routing_iters: DEFAULT_ROUTING_ITERS,
            use_capsule_batchnorm: true,
            dec_hidden: DEFAULT_HIDDEN,
            sampling: SamplingStrategy::DataDriven,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("c", self.c),
            ("d", self.d),
            ("l", self.l),
            ("d1", self.d1),
            ("routing_iters", self.routing_iters),
            ("dec_hidden", self.dec_hidden),
        ] {
            if v < 1 {
                return Err(Error::Contract(format!("bcaps config: {name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Fully connected baseline: one hidden layer with batch norm, two linear
/// heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineVaeConfig {
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub l: usize,
    #[serde(default = "default_hidden")]
    pub dec_hidden: usize,
    #[serde(default = "default_standard")]
    pub sampling: SamplingStrategy,
}

impl BaselineVaeConfig {
    pub fn new(hidden: usize, l: usize) -> Self {
        BaselineVaeConfig {
            input_dim: DEFAULT_INPUT_DIM,
            hidden,
            l,
            dec_hidden: DEFAULT_HIDDEN,
            sampling: SamplingStrategy::StandardNormal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden", self.hidden),
            ("l", self.l),
            ("dec_hidden", self.dec_hidden),
        ] {
            if v < 1 {
                return Err(Error::Contract(format!("vae config: {name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelConfig {
    Bcaps(BCapsConfig),
    Vae(BaselineVaeConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Bcaps(c) => c.validate(),
            ModelConfig::Vae(c) => c.validate(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            ModelConfig::Bcaps(c) => c.l,
            ModelConfig::Vae(c) => c.l,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelConfig::Bcaps(c) => c.input_dim,
            ModelConfig::Vae(c) => c.input_dim,
        }
    }

    pub fn sampling(&self) -> SamplingStrategy {
        match self {
            ModelConfig::Bcaps(c) => c.sampling,
            ModelConfig::Vae(c) => c.sampling,
        }
    }

    pub fn sampling_mut(&mut self) -> &mut SamplingStrategy {
        match self {
            ModelConfig::Bcaps(c) => &mut c.sampling,
            ModelConfig::Vae(c) => &mut c.sampling,
        }
    }
}

/// Trainable encoder parameter count. Convention calibrated against the
/// reference table: the capsule encoder counts its three transformation
/// tensors (capsule batch norm excluded); the baseline counts FC weights and
/// biases plus batch-norm scale/shift. Decoders are excluded on both sides.
pub fn param_count(cfg: &ModelConfig) -> u64 {
    match cfg {
        ModelConfig::Bcaps(c) => {
            let (i, cc, d, l, d1) = (
                c.input_dim as u64,
                c.c as u64,
                c.d as u64,
                c.l as u64,
                c.d1 as u64,
            );
            cc * i * d + 2 * (cc * l * d * d1)
        }
        ModelConfig::Vae(c) => {
            let (i, h, l) = (c.input_dim as u64, c.hidden as u64, c.l as u64);
            (i * h + h) + 2 * h + 2 * (h * l + l)
        }
    }
}

/// Head ids on the graph: μ and σ, each [batch, L]. For the capsule encoder
/// both are capsule norms in [0, 1); for the baseline both are unconstrained
/// linear outputs.
#[derive(Clone, Copy, Debug)]
pub struct LatentHeads {
    pub mu: VarId,
    pub sigma: VarId,
}

/// Noise for the reparameterized sample.
pub enum EpsSource<'a, S> {
    /// Raw standard-normal draws, mapped through the model's strategy.
    Eta(&'a Tensor<S>),
    /// A fully resolved ε used as-is (replaying a recorded forward).
    Eps(&'a Tensor<S>),
}

/// Maps raw standard-normal draws to ε under `strategy`. μ/σ values are only
/// read for the data-driven variant.
pub fn eps_from_eta<S: Scalar>(
    strategy: SamplingStrategy,
    eta: &Tensor<S>,
    mu: &Tensor<S>,
    sigma: &Tensor<S>,
) -> Result<Tensor<S>> {
    match strategy {
        SamplingStrategy::StandardNormal => Ok(eta.clone()),
        SamplingStrategy::ShiftedNormal => {
            let half = S::from_f64(0.5);
            Ok(eta.map(|e| half + half * e))
        }
        SamplingStrategy::DataDriven => {
            if let Some(&bad) = sigma.data().iter().find(|s| **s < S::zero()) {
                return Err(Error::Contract(format!(
                    "data-driven sampling needs sigma >= 0 everywhere, found {bad}"
                )));
            }
            let mut out = eta.clone();
            for ((o, &m), &s) in out
                .data_mut()
                .iter_mut()
                .zip(mu.data())
                .zip(sigma.data())
            {
                *o = m + s * *o;
            }
            Ok(out)
        }
    }
}

/// z = μ + σ⊙ε with ε entering the graph as a constant.
pub fn sample_with_eps<S: Scalar>(
    g: &mut Graph<S>,
    heads: LatentHeads,
    eps: Tensor<S>,
) -> Result<VarId> {
    let e = g.constant(eps);
    let se = g.mul(heads.sigma, e)?;
    g.add(heads.mu, se)
}

/// Draws ε per `strategy` and returns the reparameterized sample along with
/// the ε actually used.
pub fn sample_latent<S: Scalar>(
    g: &mut Graph<S>,
    heads: LatentHeads,
    strategy: SamplingStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<(VarId, Tensor<S>)> {
    let shape = g.value(heads.mu).shape().to_vec();
    let eta = Tensor::randn(&shape, 1.0, rng);
    let eps = eps_from_eta(strategy, &eta, g.value(heads.mu), g.value(heads.sigma))?;
    let z = sample_with_eps(g, heads, eps.clone())?;
    Ok((z, eps))
}

/// Per-sample 0.5·Σ_l(exp σ + μ² − 1 − σ), averaged over the batch. The head
/// value is plugged in as σ literally for both models.
pub fn kl_loss<S: Scalar>(g: &mut Graph<S>, heads: LatentHeads) -> Result<VarId> {
    let exp_s = g.exp(heads.sigma);
    let mu2 = g.square(heads.mu);
    let sum = g.add(exp_s, mu2)?;
    let sum = g.add_scalar(sum, -S::one());
    let sum = g.sub(sum, heads.sigma)?;
    let per_sample = g.sum_axis(sum, 1)?;
    let per_sample = g.scale(per_sample, S::from_f64(0.5));
    Ok(g.mean(per_sample))
}

/// Mean squared error over every pixel of every sample.
pub fn recon_loss<S: Scalar>(g: &mut Graph<S>, x: VarId, xhat: VarId) -> Result<VarId> {
    let d = g.sub(x, xhat)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// recon + kl_weight·kl; returns all three scalars.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    x: VarId,
    xhat: VarId,
    heads: LatentHeads,
    kl_weight: f64,
) -> Result<(VarId, VarId, VarId)> {
    let recon = recon_loss(g, x, xhat)?;
    let kl = kl_loss(g, heads)?;
    let weighted = g.scale(kl, S::from_f64(kl_weight));
    let total = g.add(recon, weighted)?;
    Ok((total, recon, kl))
}

/// FC(L→dec_hidden) + batch norm + rectifier, then FC(dec_hidden→input_dim)
/// + sigmoid. Shared verbatim by both models.
#[derive(Clone, Debug)]
pub struct Decoder<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub bn: BatchNorm<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> Decoder<S> {
    fn init<R: Rng>(l: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Decoder {
            w1: Tensor::randn(&[l, hidden], W_INIT_STD, rng),
            b1: Tensor::zeros(&[hidden]),
            bn: BatchNorm::new(&[hidden]),
            w2: Tensor::randn(&[hidden, out], W_INIT_STD, rng),
            b2: Tensor::zeros(&[out]),
        }
    }
}

fn linear<S: Scalar>(g: &mut Graph<S>, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
    let batch = g.value(x).shape()[0];
    let xw = g.matmul(x, w)?;
    let bb = g.broadcast_prepend(b, batch);
    g.add(xw, bb)
}

/// One full forward on a graph. `params` and `stats` follow the canonical
/// orders (`param_names`, batch-norm slots encoder-then-decoder); `routing`
/// is empty for the baseline.
pub struct Forward<S> {
    pub params: Vec<VarId>,
    pub x: VarId,
    pub heads: LatentHeads,
    pub eps: Tensor<S>,
    pub z: VarId,
    pub xhat: VarId,
    pub stats: Vec<BatchStats<S>>,
    pub routing: Vec<RoutingState<S>>,
}

#[derive(Clone, Debug)]
pub struct BCapsModel<S> {
    pub cfg: BCapsConfig,
    pub caps1: FcCapsuleLayer<S>,
    pub bn: Option<BatchNorm<S>>,
    pub mu_head: FcCapsuleLayer<S>,
    pub sigma_head: FcCapsuleLayer<S>,
    pub dec: Decoder<S>,
}

#[derive(Clone, Debug)]
pub struct VaeModel<S> {
    pub cfg: BaselineVaeConfig,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub bn: BatchNorm<S>,
    pub mu_w: Tensor<S>,
    pub mu_b: Tensor<S>,
    pub sigma_w: Tensor<S>,
    pub sigma_b: Tensor<S>,
    pub dec: Decoder<S>,
}

#[derive(Clone, Debug)]
pub enum Model<S> {
    Bcaps(BCapsModel<S>),
    Vae(VaeModel<S>),
}

impl<S: Scalar> Model<S> {
    /// Fresh parameters: weights zero-mean Gaussian (std 0.05) drawn in
    /// canonical order, zero biases, identity batch norm.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg {
            ModelConfig::Bcaps(c) => {
                let caps1 =
                    FcCapsuleLayer::init(1, c.input_dim, c.c, c.d, c.routing_iters, rng);
                let bn = c
                    .use_capsule_batchnorm
                    .then(|| BatchNorm::new(&[c.c, c.d]));
                let mu_head = FcCapsuleLayer::init(c.c, c.d, c.l, c.d1, c.routing_iters, rng);
                let sigma_head =
                    FcCapsuleLayer::init(c.c, c.d, c.l, c.d1, c.routing_iters, rng);
                let dec = Decoder::init(c.l, c.dec_hidden, c.input_dim, rng);
                Model::Bcaps(BCapsModel {
                    cfg: c.clone(),
                    caps1,
                    bn,
                    mu_head,
                    sigma_head,
                    dec,
                })
            }
            ModelConfig::Vae(c) => Model::Vae(VaeModel {
                cfg: c.clone(),
                w1: Tensor::randn(&[c.input_dim, c.hidden], W_INIT_STD, rng),
                b1: Tensor::zeros(&[c.hidden]),
                bn: BatchNorm::new(&[c.hidden]),
                mu_w: Tensor::randn(&[c.hidden, c.l], W_INIT_STD, rng),
                mu_b: Tensor::zeros(&[c.l]),
                sigma_w: Tensor::randn(&[c.hidden, c.l], W_INIT_STD, rng),
                sigma_b: Tensor::zeros(&[c.l]),
                dec: Decoder::init(c.l, c.dec_hidden, c.input_dim, rng),
            }),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Bcaps(m) => ModelConfig::Bcaps(m.cfg.clone()),
            Model::Vae(m) => ModelConfig::Vae(m.cfg.clone()),
        }
    }

    pub fn sampling(&self) -> SamplingStrategy {
        match self {
            Model::Bcaps(m) => m.cfg.sampling,
            Model::Vae(m) => m.cfg.sampling,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Model::Bcaps(m) => m.cfg.l,
            Model::Vae(m) => m.cfg.l,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Bcaps(m) => m.cfg.input_dim,
            Model::Vae(m) => m.cfg.input_dim,
        }
    }

    /// Trainable tensors in canonical order. Single source of truth for the
    /// optimizer, the checkpoint layout, and staged forwards.
    pub fn param_names(&self) -> Vec<&'static str> {
        match self {
            Model::Bcaps(m) => {
                let mut names = vec!["enc.caps1.w"];
                if m.bn.is_some() {
                    names.push("enc.bn.scale");
                    names.push("enc.bn.shift");
                }
                names.extend([
                    "enc.mu.w",
                    "enc.sigma.w",
                    "dec.fc1.w",
                    "dec.fc1.b",
                    "dec.bn.scale",
                    "dec.bn.shift",
                    "dec.fc2.w",
                    "dec.fc2.b",
                ]);
                names
            }
            Model::Vae(_) => vec![
                "enc.fc1.w",
                "enc.fc1.b",
                "enc.bn.scale",
                "enc.bn.shift",
                "enc.mu.w",
                "enc.mu.b",
                "enc.sigma.w",
                "enc.sigma.b",
                "dec.fc1.w",
                "dec.fc1.b",
                "dec.bn.scale",
                "dec.bn.shift",
                "dec.fc2.w",
                "dec.fc2.b",
            ],
        }
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        match self {
            Model::Bcaps(m) => {
                let mut ps = vec![&m.caps1.w];
                if let Some(bn) = &m.bn {
                    ps.push(&bn.scale);
                    ps.push(&bn.shift);
                }
                ps.extend([
                    &m.mu_head.w,
                    &m.sigma_head.w,
                    &m.dec.w1,
                    &m.dec.b1,
                    &m.dec.bn.scale,
                    &m.dec.bn.shift,
                    &m.dec.w2,
                    &m.dec.b2,
                ]);
                ps
            }
            Model::Vae(m) => vec![
                &m.w1,
                &m.b1,
                &m.bn.scale,
                &m.bn.shift,
                &m.mu_w,
                &m.mu_b,
                &m.sigma_w,
                &m.sigma_b,
                &m.dec.w1,
                &m.dec.b1,
                &m.dec.bn.scale,
                &m.dec.bn.shift,
                &m.dec.w2,
                &m.dec.b2,
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Model::Bcaps(m) => {
                let mut ps = vec![&mut m.caps1.w];
                if let Some(bn) = &mut m.bn {
                    ps.push(&mut bn.scale);
                    ps.push(&mut bn.shift);
                }
                ps.extend([
                    &mut m.mu_head.w,
                    &mut m.sigma_head.w,
                    &mut m.dec.w1,
                    &mut m.dec.b1,
                    &mut m.dec.bn.scale,
                    &mut m.dec.bn.shift,
                    &mut m.dec.w2,
                    &mut m.dec.b2,
                ]);
                ps
            }
            Model::Vae(m) => vec![
                &mut m.w1,
                &mut m.b1,
                &mut m.bn.scale,
                &mut m.bn.shift,
                &mut m.mu_w,
                &mut m.mu_b,
                &mut m.sigma_w,
                &mut m.sigma_b,
                &mut m.dec.w1,
                &mut m.dec.b1,
                &mut m.dec.bn.scale,
                &mut m.dec.bn.shift,
                &mut m.dec.w2,
                &mut m.dec.b2,
            ],
        }
    }

    /// Non-trainable state (running batch-norm statistics), name-keyed for
    /// checkpoints. Same order as the batch-stats slots in `Forward`.
    pub fn extra_names(&self) -> Vec<&'static str> {
        match self {
            Model::Bcaps(m) => {
                let mut names = Vec::new();
                if m.bn.is_some() {
                    names.push("enc.bn.running_mean");
                    names.push("enc.bn.running_var");
                }
                names.push("dec.bn.running_mean");
                names.push("dec.bn.running_var");
                names
            }
            Model::Vae(_) => vec![
                "enc.bn.running_mean",
                "enc.bn.running_var",
                "dec.bn.running_mean",
                "dec.bn.running_var",
            ],
        }
    }

    pub fn extras(&self) -> Vec<&Tensor<S>> {
        match self {
            Model::Bcaps(m) => {
                let mut ts = Vec::new();
                if let Some(bn) = &m.bn {
                    ts.push(&bn.running_mean);
                    ts.push(&bn.running_var);
                }
                ts.push(&m.dec.bn.running_mean);
                ts.push(&m.dec.bn.running_var);
                ts
            }
            Model::Vae(m) => vec![
                &m.bn.running_mean,
                &m.bn.running_var,
                &m.dec.bn.running_mean,
                &m.dec.bn.running_var,
            ],
        }
    }

    pub fn extras_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Model::Bcaps(m) => {
                let mut ts = Vec::new();
                if let Some(bn) = &mut m.bn {
                    ts.push(&mut bn.running_mean);
                    ts.push(&mut bn.running_var);
                }
                ts.push(&mut m.dec.bn.running_mean);
                ts.push(&mut m.dec.bn.running_var);
                ts
            }
            Model::Vae(m) => vec![
                &mut m.bn.running_mean,
                &mut m.bn.running_var,
                &mut m.dec.bn.running_mean,
                &mut m.dec.bn.running_var,
            ],
        }
    }

    /// Folds one train-mode forward's batch statistics into the running
    /// estimates. `stats` must come from this model's `forward`.
    pub fn fold_stats(&mut self, stats: &[BatchStats<S>]) {
        match self {
            Model::Bcaps(m) => {
                let mut it = stats.iter();
                if let Some(bn) = &mut m.bn {
                    if let Some(s) = it.next() {
                        bn.update_running(s);
                    }
                }
                if let Some(s) = it.next() {
                    m.dec.bn.update_running(s);
                }
            }
            Model::Vae(m) => {
                let mut it = stats.iter();
                if let Some(s) = it.next() {
                    m.bn.update_running(s);
                }
                if let Some(s) = it.next() {
                    m.dec.bn.update_running(s);
                }
            }
        }
    }

    /// Stages every trainable tensor on the graph in canonical order.
    pub fn stage(&self, g: &mut Graph<S>) -> Vec<VarId> {
        self.params()
            .into_iter()
            .map(|t| g.var(t.clone(), true))
            .collect()
    }

    /// Convenience forward: stages parameters, enters x as a constant.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        x: &Tensor<S>,
        mode: Mode,
        eps: EpsSource<'_, S>,
        frozen: Option<&[Tensor<S>]>,
    ) -> Result<Forward<S>> {
        let params = self.stage(g);
        let xid = g.constant(x.clone());
        self.forward_staged(g, &params, xid, mode, eps, frozen)
    }

    /// Forward with pre-staged parameter ids (canonical order). `frozen`
    /// bypasses dynamic routing with recorded couplings, one tensor per
    /// capsule layer in forward order; it must be None or length 3 for the
    /// capsule model and is ignored by the baseline.
    pub fn forward_staged(
        &self,
        g: &mut Graph<S>,
        params: &[VarId],
        x: VarId,
        mode: Mode,
        eps: EpsSource<'_, S>,
        frozen: Option<&[Tensor<S>]>,
    ) -> Result<Forward<S>> {
        let expected = self.params().len();
        if params.len() != expected {
            return Err(Error::Contract(format!(
                "staged forward needs {expected} parameter ids, got {}",
                params.len()
            )));
        }
        match self {
            Model::Bcaps(m) => m.forward_staged(g, params, x, mode, eps, frozen),
            Model::Vae(m) => {
                if frozen.is_some_and(|f| !f.is_empty()) {
                    return Err(Error::Contract(
                        "baseline forward does not take frozen couplings".into(),
                    ));
                }
                m.forward_staged(g, params, x, mode, eps)
            }
        }
    }
}

fn resolve_eps<S: Scalar>(
    g: &Graph<S>,
    heads: LatentHeads,
    strategy: SamplingStrategy,
    eps: EpsSource<'_, S>,
) -> Result<Tensor<S>> {
    match eps {
        EpsSource::Eta(eta) => eps_from_eta(strategy, eta, g.value(heads.mu), g.value(heads.sigma)),
        EpsSource::Eps(e) => Ok(e.clone()),
    }
}

impl<S: Scalar> BCapsModel<S> {
    fn forward_staged(
        &self,
        g: &mut Graph<S>,
        params: &[VarId],
        x: VarId,
        mode: Mode,
        eps: EpsSource<'_, S>,
        frozen: Option<&[Tensor<S>]>,
    ) -> Result<Forward<S>> {
        if let Some(f) = frozen {
            if f.len() != 3 {
                return Err(Error::Contract(format!(
                    "capsule forward takes 3 frozen coupling tensors, got {}",
                    f.len()
                )));
            }
        }
        let batch = g.value(x).shape()[0];
        let mut it = params.iter().copied();
        let w1 = it.next().unwrap();
        let bn_ids = self.bn.as_ref().map(|_| {
            let s = it.next().unwrap();
            let b = it.next().unwrap();
            (s, b)
        });
        let wmu = it.next().unwrap();
        let wsig = it.next().unwrap();
        let dw1 = it.next().unwrap();
        let db1 = it.next().unwrap();
        let dbs = it.next().unwrap();
        let dbh = it.next().unwrap();
        let dw2 = it.next().unwrap();
        let db2 = it.next().unwrap();

        let x3 = g.reshape(x, &[batch, 1, self.cfg.input_dim])?;
        let (v1, r1) = self.caps1.forward(g, w1, x3, frozen.map(|f| &f[0]))?;
        let mut stats = Vec::new();
        let u1 = if let (Some(bn), Some((bs, bh))) = (&self.bn, bn_ids) {
            let (u, st) = caps_batchnorm(
                g,
                v1,
                bs,
                bh,
                (&bn.running_mean, &bn.running_var),
                mode,
            )?;
            if let Some(st) = st {
                stats.push(st);
            }
            u
        } else {
            v1
        };
        let (vmu, rmu) = self.mu_head.forward(g, wmu, u1, frozen.map(|f| &f[1]))?;
        let (vsig, rsig) = self
            .sigma_head
            .forward(g, wsig, u1, frozen.map(|f| &f[2]))?;
        let mu = g.norm_last(vmu)?;
        let sigma = g.norm_last(vsig)?;
        let heads = LatentHeads { mu, sigma };

        let eps = resolve_eps(g, heads, self.cfg.sampling, eps)?;
        let z = sample_with_eps(g, heads, eps.clone())?;
        let (xhat, dec_stats) = decode_staged(
            g,
            z,
            (dw1, db1, dbs, dbh, dw2, db2),
            (&self.dec.bn.running_mean, &self.dec.bn.running_var),
            mode,
        )?;
        if let Some(st) = dec_stats {
            stats.push(st);
        }
        Ok(Forward {
            params: params.to_vec(),
            x,
            heads,
            eps,
            z,
            xhat,
            stats,
            routing: vec![r1, rmu, rsig],
        })
    }
}

impl<S: Scalar> VaeModel<S> {
    fn forward_staged(
        &self,
        g: &mut Graph<S>,
        params: &[VarId],
        x: VarId,
        mode: Mode,
        eps: EpsSource<'_, S>,
    ) -> Result<Forward<S>> {
        let mut it = params.iter().copied();
        let w1 = it.next().unwrap();
        let b1 = it.next().unwrap();
        let bs = it.next().unwrap();
        let bh = it.next().unwrap();
        let mw = it.next().unwrap();
        let mb = it.next().unwrap();
        let sw = it.next().unwrap();
        let sb = it.next().unwrap();
        let dw1 = it.next().unwrap();
        let db1 = it.next().unwrap();
        let dbs = it.next().unwrap();
        let dbh = it.next().unwrap();
        let dw2 = it.next().unwrap();
        let db2 = it.next().unwrap();

        let h = linear(g, x, w1, b1)?;
        let mut stats = Vec::new();
        let (hbn, st) = batchnorm_forward(
            g,
            h,
            bs,
            bh,
            (&self.bn.running_mean, &self.bn.running_var),
            mode,
        )?;
        if let Some(st) = st {
            stats.push(st);
        }
        let hr = g.relu(hbn);
        let mu = linear(g, hr, mw, mb)?;
        let sigma = linear(g, hr, sw, sb)?;
        let heads = LatentHeads { mu, sigma };

        let eps = resolve_eps(g, heads, self.cfg.sampling, eps)?;
        let z = sample_with_eps(g, heads, eps.clone())?;
        let (xhat, dec_stats) = decode_staged(
            g,
            z,
            (dw1, db1, dbs, dbh, dw2, db2),
            (&self.dec.bn.running_mean, &self.dec.bn.running_var),
            mode,
        )?;
        if let Some(st) = dec_stats {
            stats.push(st);
        }
        Ok(Forward {
            params: params.to_vec(),
            x,
            heads,
            eps,
            z,
            xhat,
            stats,
            routing: Vec::new(),
        })
    }
}

type DecIds = (VarId, VarId, VarId, VarId, VarId, VarId);

fn decode_staged<S: Scalar>(
    g: &mut Graph<S>,
    z: VarId,
    (w1, b1, bs, bh, w2, b2): DecIds,
    running: (&Tensor<S>, &Tensor<S>),
    mode: Mode,
) -> Result<(VarId, Option<BatchStats<S>>)> {
    let h = linear(g, z, w1, b1)?;
    let (hbn, stats) = batchnorm_forward(g, h, bs, bh, running, mode)?;
    let hr = g.relu(hbn);
    let o = linear(g, hr, w2, b2)?;
    Ok((g.sigmoid(o), stats))
}

/// Standalone decode from latent codes, staging the model's own decoder
/// parameters (reconstruction-only paths: eval, export).
pub fn decode<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    z: &Tensor<S>,
    mode: Mode,
) -> Result<VarId> {
    let dec = match model {
        Model::Bcaps(m) => &m.dec,
        Model::Vae(m) => &m.dec,
    };
    let zid = g.constant(z.clone());
    let w1 = g.var(dec.w1.clone(), true);
    let b1 = g.var(dec.b1.clone(), true);
    let bs = g.var(dec.bn.scale.clone(), true);
    let bh = g.var(dec.bn.shift.clone(), true);
    let w2 = g.var(dec.w2.clone(), true);
    let b2 = g.var(dec.b2.clone(), true);
    let (xhat, _) = decode_staged(
        g,
        zid,
        (w1, b1, bs, bh, w2, b2),
        (&dec.bn.running_mean, &dec.bn.running_var),
        mode,
    )?;
    Ok(xhat)
}

/// Finite-difference check of the full training loss against the backward
/// pass, at micro scale in f64. Returns the max relative error over every
/// parameter entry and every input pixel.
///
/// Parameters are re-drawn at healthy magnitudes first: the default
/// small-std init stacks quadratically small squash outputs, whose
/// near-zero gradients drown the finite-difference probe in roundoff.
/// Routing couplings and ε are recorded at the base point, so the probe
/// differentiates the same frozen function the backward pass does.
pub fn model_grad_err(cfg: &ModelConfig, seed: u64) -> Result<f64> {
    use crate::gradcheck::grad_check_many;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::init(cfg, &mut rng)?;
    let names = model.param_names();
    for (name, t) in names.iter().zip(model.params_mut()) {
        for v in t.data_mut() {
            *v = if name.contains("bn.scale") {
                1.0 + rng.gen_range(-0.2..0.2)
            } else {
                rng.gen_range(-0.4..0.4)
            };
        }
    }
    let batch = 2;
    let dim = cfg.input_dim();
    let x = Tensor::new(
        &[batch, dim],
        (0..batch * dim).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )?;
    let eta = Tensor::randn(&[batch, cfg.latent_dim()], 1.0, &mut rng);

    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &x, Mode::Train, EpsSource::Eta(&eta), None)?;
    let frozen: Vec<Tensor<f64>> = fwd.routing.iter().map(|r| r.couplings.clone()).collect();
    let frozen = (!frozen.is_empty()).then_some(frozen);
    let eps0 = fwd.eps.clone();

    let n = model.params().len();
    let mut inputs: Vec<Tensor<f64>> = model.params().into_iter().cloned().collect();
    inputs.push(x);
    grad_check_many(
        |g, vars| {
            let (pids, rest) = vars.split_at(n);
            let fwd = model.forward_staged(
                g,
                pids,
                rest[0],
                Mode::Train,
                EpsSource::Eps(&eps0),
                frozen.as_deref(),
            )?;
            let (total, _, _) = total_loss(g, rest[0], fwd.xhat, fwd.heads, 1.0)?;
            Ok(total)
        },
        &inputs,
        1e-5,
    )
}
