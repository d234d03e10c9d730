//! Desk-scale classifiers for scoring reconstructions: a multinomial
//! logistic regression trained on the tape (default), and a one-vs-rest
//! RBF-kernel SVM fit with sequential minimal optimization on a bounded
//! subset. Both train on original images and are then applied to
//! reconstructed ones, so comparisons between models share one classifier.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernels;
use crate::optim::{adam_step, AdamState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierKind {
    SoftmaxLinear,
    RbfSvmSubset,
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "softmax_linear" => Ok(ClassifierKind::SoftmaxLinear),
            "rbf_svm_subset" => Ok(ClassifierKind::RbfSvmSubset),
            other => Err(Error::Contract(format!(
                "unknown classifier '{other}' (expected softmax_linear or rbf_svm_subset)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Cap on SVM training samples; the kernel matrix is dense.
    pub svm_subset: usize,
    pub svm_c: f64,
    pub svm_gamma: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            kind: ClassifierKind::SoftmaxLinear,
            epochs: 5,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
            svm_subset: 5000,
            svm_c: 100.0,
            svm_gamma: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearClassifier<S> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub num_classes: usize,
}

/// One binary one-vs-rest machine. `coef[i]` is α_i·y_i over the stored
/// subset; a degenerate single-label problem collapses to a constant score.
#[derive(Clone, Debug)]
struct SvmMachine {
    coef: Vec<f64>,
    bias: f64,
    constant: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SvmClassifier {
    x: Vec<f64>,
    n: usize,
    dim: usize,
    gamma: f64,
    machines: Vec<SvmMachine>,
}

#[derive(Clone, Debug)]
pub enum Classifier<S> {
    Linear(LinearClassifier<S>),
    Svm(SvmClassifier),
}

fn check_training_inputs<S: Scalar>(
    images: &Tensor<S>,
    labels: &[u8],
    num_classes: usize,
) -> Result<()> {
    if images.rank() != 2 {
        return Err(Error::Contract(
            "classifier expects [n, pixels] images".into(),
        ));
    }
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::EmptyInput("classifier training set"));
    }
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::LabelRange {
            label: bad as usize,
            num_classes,
        });
    }
    Ok(())
}

pub fn train_classifier<S: Scalar>(
    images: &Tensor<S>,
    labels: &[u8],
    num_classes: usize,
    cfg: &ClassifierConfig,
) -> Result<Classifier<S>> {
    check_training_inputs(images, labels, num_classes)?;
    match cfg.kind {
        ClassifierKind::SoftmaxLinear => Ok(Classifier::Linear(train_softmax_linear(
            images,
            labels,
            num_classes,
            cfg,
        )?)),
        ClassifierKind::RbfSvmSubset => Ok(Classifier::Svm(train_rbf_svm(
            images,
            labels,
            num_classes,
            cfg,
        )?)),
    }
}

pub fn classify<S: Scalar>(clf: &Classifier<S>, images: &Tensor<S>) -> Result<Vec<u8>> {
    if images.rank() != 2 {
        return Err(Error::Contract("classify expects [n, pixels] images".into()));
    }
    match clf {
        Classifier::Linear(lin) => lin.predict(images),
        Classifier::Svm(svm) => svm.predict(images),
    }
}

/// Cross-entropy via logsumexp on the tape: mean_i(lse(logits_i) − logit_{i,y_i}).
fn train_softmax_linear<S: Scalar>(
    images: &Tensor<S>,
    labels: &[u8],
    num_classes: usize,
    cfg: &ClassifierConfig,
) -> Result<LinearClassifier<S>> {
    let n = images.shape()[0];
    let dim = images.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut w = Tensor::<S>::randn(&[dim, num_classes], 0.01, &mut rng);
    let mut b = Tensor::<S>::zeros(&[num_classes]);
    let mut adam = AdamState::new(&[&w, &b]);

    let bs = cfg.batch_size.min(n).max(1);
    let nbatches = n / bs;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for bi in 0..nbatches {
            let idx = &order[bi * bs..(bi + 1) * bs];
            let rows = idx.len();
            let mut xb = Vec::with_capacity(rows * dim);
            let mut onehot = vec![S::from_f64(0.0); rows * num_classes];
            for (r, &i) in idx.iter().enumerate() {
                xb.extend_from_slice(&images.data()[i * dim..(i + 1) * dim]);
                onehot[r * num_classes + labels[i] as usize] = S::from_f64(1.0);
            }

            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&[rows, dim], xb)?);
            let y = g.constant(Tensor::new(&[rows, num_classes], onehot)?);
            let wv = g.var(w.clone(), true);
            let bv = g.var(b.clone(), true);
            let bb = g.broadcast_prepend(bv, rows);
            let xw = g.matmul(x, wv)?;
            let logits = g.add(xw, bb)?;
            let lse = g.log_sum_exp(logits, 1)?;
            let picked_terms = g.mul(logits, y)?;
            let picked = g.sum_axis(picked_terms, 1)?;
            let diff = g.sub(lse, picked)?;
            let loss = g.mean(diff);
            g.backward(loss)?;

            let gw = g
                .grad(wv)
                .cloned()
                .ok_or_else(|| Error::Contract("missing weight gradient".into()))?;
            let gb = g
                .grad(bv)
                .cloned()
                .ok_or_else(|| Error::Contract("missing bias gradient".into()))?;
            adam_step(
                &mut [&mut w, &mut b],
                &[&gw, &gb],
                &["clf.w", "clf.b"],
                &mut adam,
                cfg.learning_rate,
            )?;
        }
    }
    Ok(LinearClassifier { w, b, num_classes })
}

impl<S: Scalar> LinearClassifier<S> {
    pub fn predict(&self, images: &Tensor<S>) -> Result<Vec<u8>> {
        let n = images.shape()[0];
        let dim = images.shape()[1];
        if dim != self.w.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "classify",
                lhs: images.shape().to_vec(),
                rhs: self.w.shape().to_vec(),
            });
        }
        let k = self.num_classes;
        let mut logits = vec![S::from_f64(0.0); n * k];
        kernels::matmul(n, dim, k, images.data(), self.w.data(), &mut logits);
        let mut out = Vec::with_capacity(n);
        for row in logits.chunks_exact(k) {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (c, (&l, &bias)) in row.iter().zip(self.b.data()).enumerate() {
                let v = Scalar::to_f64(l) + Scalar::to_f64(bias);
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out.push(best as u8);
        }
        Ok(out)
    }
}

fn rbf_kernel_matrix(x: &[f64], n: usize, dim: usize, gamma: f64) -> Vec<f64> {
    // ‖a−b‖² = ‖a‖² + ‖b‖² − 2a·b, with the dot products batched.
    let sq: Vec<f64> = (0..n)
        .map(|i| x[i * dim..(i + 1) * dim].iter().map(|v| v * v).sum())
        .collect();
    let mut dots = vec![0.0f64; n * n];
    let xt = {
        let mut t = vec![0.0f64; n * dim];
        kernels::transpose(n, dim, x, &mut t);
        t
    };
    kernels::matmul(n, dim, n, x, &xt, &mut dots);
    for i in 0..n {
        for j in 0..n {
            let d2 = (sq[i] + sq[j] - 2.0 * dots[i * n + j]).max(0.0);
            dots[i * n + j] = (-gamma * d2).exp();
        }
    }
    dots
}

/// Simplified SMO over a precomputed kernel row cache. Decision values for
/// every training point are kept incrementally, so each accepted pair update
/// is O(n).
fn smo_binary(
    kmat: &[f64],
    y: &[f64],
    n: usize,
    c: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, f64) {
    const TOL: f64 = 1e-3;
    const MAX_QUIET_PASSES: usize = 3;
    const MAX_TOTAL_PASSES: usize = 60;

    let mut alpha = vec![0.0f64; n];
    let mut bias = 0.0f64;
    let mut f = vec![0.0f64; n];
    let mut quiet = 0;
    let mut total = 0;
    while quiet < MAX_QUIET_PASSES && total < MAX_TOTAL_PASSES {
        let mut changed = 0;
        for i in 0..n {
            let ei = f[i] + bias - y[i];
            let viol = (y[i] * ei < -TOL && alpha[i] < c) || (y[i] * ei > TOL && alpha[i] > 0.0);
            if !viol {
                continue;
            }
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let ej = f[j] + bias - y[j];
            let (ai_old, aj_old) = (alpha[i], alpha[j]);
            let (lo, hi) = if (y[i] - y[j]).abs() > f64::EPSILON {
                ((aj_old - ai_old).max(0.0), (c + aj_old - ai_old).min(c))
            } else {
                ((ai_old + aj_old - c).max(0.0), (ai_old + aj_old).min(c))
            };
            if hi - lo < 1e-12 {
                continue;
            }
            let kii = kmat[i * n + i];
            let kjj = kmat[j * n + j];
            let kij = kmat[i * n + j];
            let eta = 2.0 * kij - kii - kjj;
            if eta >= 0.0 {
                continue;
            }
            let mut aj = aj_old - y[j] * (ei - ej) / eta;
            aj = aj.clamp(lo, hi);
            if (aj - aj_old).abs() < 1e-7 {
                continue;
            }
            let ai = ai_old + y[i] * y[j] * (aj_old - aj);
            let di = (ai - ai_old) * y[i];
            let dj = (aj - aj_old) * y[j];

            let b1 = -ei - di * kii - dj * kij;
            let b2 = -ej - di * kij - dj * kjj;
            let db = if ai > 0.0 && ai < c {
                b1
            } else if aj > 0.0 && aj < c {
                b2
            } else {
                (b1 + b2) / 2.0
            };

            alpha[i] = ai;
            alpha[j] = aj;
            bias += db;
            let (ri, rj) = (&kmat[i * n..(i + 1) * n], &kmat[j * n..(j + 1) * n]);
            for ((fv, &ki), &kj) in f.iter_mut().zip(ri).zip(rj) {
                *fv += di * ki + dj * kj;
            }
            changed += 1;
        }
        quiet = if changed == 0 { quiet + 1 } else { 0 };
        total += 1;
    }
    (alpha, bias)
}

fn train_rbf_svm<S: Scalar>(
    images: &Tensor<S>,
    labels: &[u8],
    num_classes: usize,
    cfg: &ClassifierConfig,
) -> Result<SvmClassifier> {
    let dim = images.shape()[1];
    let n = images.shape()[0].min(cfg.svm_subset.max(1));
    let x: Vec<f64> = images.data()[..n * dim]
        .iter()
        .map(|&v| Scalar::to_f64(v))
        .collect();
    let kmat = rbf_kernel_matrix(&x, n, dim, cfg.svm_gamma);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut machines = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let y: Vec<f64> = labels[..n]
            .iter()
            .map(|&l| if l as usize == class { 1.0 } else { -1.0 })
            .collect();
        let pos = y.iter().filter(|&&v| v > 0.0).count();
        if pos == 0 || pos == n {
            machines.push(SvmMachine {
                coef: vec![],
                bias: 0.0,
                constant: Some(if pos == n { 1.0 } else { -1.0 }),
            });
            continue;
        }
        let (alpha, bias) = smo_binary(&kmat, &y, n, cfg.svm_c, &mut rng);
        let coef: Vec<f64> = alpha.iter().zip(&y).map(|(&a, &yv)| a * yv).collect();
        machines.push(SvmMachine {
            coef,
            bias,
            constant: None,
        });
    }
    Ok(SvmClassifier {
        x,
        n,
        dim,
        gamma: cfg.svm_gamma,
        machines,
    })
}

impl SvmClassifier {
    pub fn predict<S: Scalar>(&self, images: &Tensor<S>) -> Result<Vec<u8>> {
        let n = images.shape()[0];
        let dim = images.shape()[1];
        if dim != self.dim {
            return Err(Error::ShapeMismatch {
                op: "classify",
                lhs: images.shape().to_vec(),
                rhs: vec![self.n, self.dim],
            });
        }
        let sq_train: Vec<f64> = (0..self.n)
            .map(|i| {
                self.x[i * dim..(i + 1) * dim]
                    .iter()
                    .map(|v| v * v)
                    .sum()
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        let mut krow = vec![0.0f64; self.n];
        for r in 0..n {
            let q: Vec<f64> = images.data()[r * dim..(r + 1) * dim]
                .iter()
                .map(|&v| Scalar::to_f64(v))
                .collect();
            let sq_q: f64 = q.iter().map(|v| v * v).sum();
            for (j, kv) in krow.iter_mut().enumerate() {
                let dot: f64 = self.x[j * dim..(j + 1) * dim]
                    .iter()
                    .zip(&q)
                    .map(|(a, b)| a * b)
                    .sum();
                let d2 = (sq_train[j] + sq_q - 2.0 * dot).max(0.0);
                *kv = (-self.gamma * d2).exp();
            }
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (c, m) in self.machines.iter().enumerate() {
                let v = match m.constant {
                    Some(v) => v,
                    None => m.coef.iter().zip(&krow).map(|(a, k)| a * k).sum::<f64>() + m.bias,
                };
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out.push(best as u8);
        }
        Ok(out)
    }
}

/// Fraction of matching labels.
pub fn accuracy(truth: &[u8], pred: &[u8]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|&(a, b)| a == b).count() as f64 / truth.len() as f64
}
