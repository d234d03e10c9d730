//! Mini-batch training loop with a three-stream seeded RNG: one stream for
//! parameter initialization, one for epoch shuffles, one for the sampling
//! noise. Keeping the streams apart makes runs that differ only in sampling
//! strategy comparable under a single seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsules::Mode;
use crate::dataio::{fmt_f64, write_csv, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{total_loss, EpsSource, Model, ModelConfig};
use crate::optim::{adam_step, AdamState};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Contract(format!(
                "unknown precision '{other}' (expected f32 or f64)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub kl_weight: f64,
    /// Linear KL ramp-in over this many leading epochs; 0 disables.
    pub kl_warmup_epochs: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 100,
            learning_rate: 1e-3,
            seed: 0,
            kl_weight: 1.0,
            kl_warmup_epochs: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Contract(
                "batch_size must be >= 2 (batch norm)".into(),
            ));
        }
        if self.epochs < 1 {
            return Err(Error::Contract("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

fn split_pos(p: u128) -> [u64; 2] {
    [p as u64, (p >> 64) as u64]
}

fn join_pos(p: [u64; 2]) -> u128 {
    (p[1] as u128) << 64 | p[0] as u128
}

/// The three derived RNG streams. Each is the seeded generator on its own
/// ChaCha stream, so advancing one never disturbs the others.
#[derive(Clone, Debug)]
pub struct RngStreams {
    pub init: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
    pub eps: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let mk = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng
        };
        RngStreams {
            init: mk(0),
            shuffle: mk(1),
            eps: mk(2),
        }
    }

    /// Word positions (lo, hi) in stream order, for checkpointing.
    pub fn word_pos(&self) -> [[u64; 2]; 3] {
        [
            split_pos(self.init.get_word_pos()),
            split_pos(self.shuffle.get_word_pos()),
            split_pos(self.eps.get_word_pos()),
        ]
    }

    pub fn restore(seed: u64, pos: [[u64; 2]; 3]) -> Self {
        let mut s = RngStreams::new(seed);
        s.init.set_word_pos(join_pos(pos[0]));
        s.shuffle.set_word_pos(join_pos(pos[1]));
        s.eps.set_word_pos(join_pos(pos[2]));
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainState<S> {
    pub model: Model<S>,
    pub adam: AdamState<S>,
    /// Completed epochs.
    pub epoch: u64,
    pub streams: RngStreams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

pub type TrainingHistory = Vec<EpochStats>;

/// Fresh model and optimizer under the config's seed.
pub fn init_state<S: Scalar>(mcfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainState<S>> {
    cfg.validate()?;
    let mut streams = RngStreams::new(cfg.seed);
    let model = Model::init(mcfg, &mut streams.init)?;
    let adam = AdamState::new(&model.params());
    Ok(TrainState {
        model,
        adam,
        epoch: 0,
        streams,
    })
}

fn effective_kl_weight(cfg: &TrainConfig, epoch_index: u64) -> f64 {
    if cfg.kl_warmup_epochs == 0 {
        cfg.kl_weight
    } else {
        let ramp = ((epoch_index + 1) as f64 / cfg.kl_warmup_epochs as f64).min(1.0);
        cfg.kl_weight * ramp
    }
}

/// Runs `epochs` additional epochs. Shuffles with the shuffle stream each
/// epoch, drops the last incomplete batch, halts on a non-finite loss, and
/// invokes `on_epoch` after each completed epoch (checkpoint/grid hooks).
pub fn train_epochs<S: Scalar>(
    state: &mut TrainState<S>,
    data: &Dataset<S>,
    cfg: &TrainConfig,
    epochs: usize,
    on_epoch: &mut dyn FnMut(&TrainState<S>, &EpochStats) -> Result<()>,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    let n = data.len();
    if n < cfg.batch_size {
        return Err(Error::Contract(format!(
            "dataset has {n} items, batch size {} needs at least that many",
            cfg.batch_size
        )));
    }
    let bs = cfg.batch_size;
    let nbatches = n / bs;
    let latent = state.model.latent_dim();
    let mut history = Vec::with_capacity(epochs);

    for _ in 0..epochs {
        let epoch_index = state.epoch;
        let kl_w = effective_kl_weight(cfg, epoch_index);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut state.streams.shuffle);

        let (mut sum_recon, mut sum_kl, mut sum_total) = (0.0f64, 0.0f64, 0.0f64);
        for b in 0..nbatches {
            let x = data.batch(&idx[b * bs..(b + 1) * bs]);
            let eta = Tensor::randn(&[bs, latent], 1.0, &mut state.streams.eps);

            let mut g = Graph::new();
            let fwd = state
                .model
                .forward(&mut g, &x, Mode::Train, EpsSource::Eta(&eta), None)?;
            let (total, recon, kl) = total_loss(&mut g, fwd.x, fwd.xhat, fwd.heads, kl_w)?;
            let tv = Scalar::to_f64(g.value(total).item());
            if !tv.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch_index as usize + 1,
                    batch: b,
                });
            }
            sum_recon += Scalar::to_f64(g.value(recon).item());
            sum_kl += Scalar::to_f64(g.value(kl).item());
            sum_total += tv;

            g.backward(total)?;
            let grads: Vec<Tensor<S>> = fwd
                .params
                .iter()
                .map(|&id| {
                    g.grad(id).cloned().ok_or_else(|| {
                        Error::Contract("parameter missing from backward sweep".into())
                    })
                })
                .collect::<Result<_>>()?;
            let grefs: Vec<&Tensor<S>> = grads.iter().collect();
            let names = state.model.param_names();
            let mut prefs = state.model.params_mut();
            adam_step(
                &mut prefs,
                &grefs,
                &names,
                &mut state.adam,
                cfg.learning_rate,
            )?;
            drop(prefs);
            state.model.fold_stats(&fwd.stats);
        }

        state.epoch += 1;
        let stats = EpochStats {
            epoch: state.epoch,
            recon: sum_recon / nbatches as f64,
            kl: sum_kl / nbatches as f64,
            total: sum_total / nbatches as f64,
        };
        on_epoch(state, &stats)?;
        history.push(stats);
    }
    Ok(history)
}

/// Initialize and train for the configured epoch count.
pub fn train<S: Scalar>(
    mcfg: &ModelConfig,
    data: &Dataset<S>,
    cfg: &TrainConfig,
) -> Result<(TrainState<S>, TrainingHistory)> {
    let mut state = init_state(mcfg, cfg)?;
    let history = train_epochs(&mut state, data, cfg, cfg.epochs, &mut |_, _| Ok(()))?;
    Ok((state, history))
}

pub fn save_history(path: &std::path::Path, history: &TrainingHistory) -> Result<()> {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                fmt_f64(e.recon),
                fmt_f64(e.kl),
                fmt_f64(e.total),
            ]
        })
        .collect();
    write_csv(
        path,
        &["epoch", "recon_loss", "kl_loss", "total_loss"],
        &rows,
    )
}

/// Eval-mode reconstruction of a full image set with strategy-consistent
/// sampling from a dedicated seeded stream. Returns (x̂ [n, dim], z [n, L]).
/// Output is independent of `batch_size` because the noise is consumed in
/// row order.
pub fn run_eval<S: Scalar>(
    model: &Model<S>,
    images: &Tensor<S>,
    seed: u64,
    batch_size: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if images.rank() != 2 {
        return Err(Error::Contract("run_eval expects [n, pixels] images".into()));
    }
    let n = images.shape()[0];
    let dim = images.shape()[1];
    let latent = model.latent_dim();
    let bs = batch_size.max(1);
    let mut eps_rng = ChaCha8Rng::seed_from_u64(seed);
    eps_rng.set_stream(2);

    let mut xhat = Vec::with_capacity(n * dim);
    let mut zs = Vec::with_capacity(n * latent);
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        let rows = end - start;
        let x = Tensor::new(
            &[rows, dim],
            images.data()[start * dim..end * dim].to_vec(),
        )?;
        let eta = Tensor::randn(&[rows, latent], 1.0, &mut eps_rng);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &x, Mode::Eval, EpsSource::Eta(&eta), None)?;
        xhat.extend_from_slice(g.value(fwd.xhat).data());
        zs.extend_from_slice(g.value(fwd.z).data());
        start = end;
    }
    Ok((Tensor::new(&[n, dim], xhat)?, Tensor::new(&[n, latent], zs)?))
}
