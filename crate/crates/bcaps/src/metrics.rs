//! Reconstruction and classification metrics. Everything here computes in
//! f64 regardless of the model precision, with population statistics (divide
//! by n) throughout so small evaluation sets need no bias correction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stabilizers for the luminance and contrast terms, (0.01)^2 and (0.03)^2
/// on a unit dynamic range.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn as_f64_pair<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.data().is_empty() {
        return Err(Error::EmptyInput("metric"));
    }
    let fa = a.data().iter().map(|&v| Scalar::to_f64(v)).collect();
    let fb = b.data().iter().map(|&v| Scalar::to_f64(v)).collect();
    Ok((fa, fb))
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Single-window SSIM over the whole image, treated as a flat vector.
/// The same moment loop serves both inputs, so ssim(a, a) is exactly 1.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    let (fa, fb) = as_f64_pair(a, b)?;
    Ok(ssim_f64(&fa, &fb))
}

fn ssim_f64(fa: &[f64], fb: &[f64]) -> f64 {
    let n = fa.len() as f64;
    let mu_a = mean(fa);
    let mu_b = mean(fb);
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in fa.iter().zip(fb) {
        let dx = x - mu_a;
        let dy = y - mu_b;
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    va /= n;
    vb /= n;
    cov /= n;
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Mean squared error over all elements.
pub fn mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    let (fa, fb) = as_f64_pair(a, b)?;
    Ok(mse_f64(&fa, &fb))
}

fn mse_f64(fa: &[f64], fb: &[f64]) -> f64 {
    let n = fa.len() as f64;
    fa.iter().zip(fb).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Per-image reconstruction quality for a batch, plus population summaries.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub mse: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

fn population_std(x: &[f64], mu: f64) -> f64 {
    (x.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Row-by-row MSE and SSIM for `[n, pixels]` originals vs reconstructions.
pub fn evaluate_reconstructions<S: Scalar>(
    x: &Tensor<S>,
    xhat: &Tensor<S>,
) -> Result<MetricsReport> {
    if x.rank() != 2 {
        return Err(Error::Contract(
            "evaluate_reconstructions expects [n, pixels] tensors".into(),
        ));
    }
    let (fa, fb) = as_f64_pair(x, xhat)?;
    let n = x.shape()[0];
    let dim = x.shape()[1];
    let mut per_mse = Vec::with_capacity(n);
    let mut per_ssim = Vec::with_capacity(n);
    for i in 0..n {
        let ra = &fa[i * dim..(i + 1) * dim];
        let rb = &fb[i * dim..(i + 1) * dim];
        per_mse.push(mse_f64(ra, rb));
        per_ssim.push(ssim_f64(ra, rb));
    }
    let mse_mean = mean(&per_mse);
    let ssim_mean = mean(&per_ssim);
    Ok(MetricsReport {
        mse_mean,
        mse_std: population_std(&per_mse, mse_mean),
        ssim_mean,
        ssim_std: population_std(&per_ssim, ssim_mean),
        mse: per_mse,
        ssim: per_ssim,
    })
}

/// Row-major confusion counts, rows indexed by true label, columns by
/// predicted label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn from_labels(truth: &[u8], pred: &[u8], num_classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::EmptyInput("confusion"));
        }
        if truth.len() != pred.len() {
            return Err(Error::Contract(format!(
                "label count mismatch: {} true vs {} predicted",
                truth.len(),
                pred.len()
            )));
        }
        let mut counts = vec![0u64; num_classes * num_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            for label in [t, p] {
                if label as usize >= num_classes {
                    return Err(Error::LabelRange {
                        label: label as usize,
                        num_classes,
                    });
                }
            }
            counts[t as usize * num_classes + p as usize] += 1;
        }
        Ok(Confusion {
            num_classes,
            counts,
        })
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// One-vs-rest F1 per class; a class with no true or predicted
    /// instances scores 0.
    pub fn f1_per_class(&self) -> Vec<f64> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..k).filter(|&t| t != c).map(|t| self.count(t, c)).sum();
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let denom = 2 * tp + fp + fn_;
                if denom == 0 {
                    0.0
                } else {
                    2.0 * tp as f64 / denom as f64
                }
            })
            .collect()
    }

    pub fn f1_macro(&self) -> f64 {
        mean(&self.f1_per_class())
    }
}

/// Macro-averaged F1 over `num_classes` one-vs-rest problems.
pub fn f1_macro(truth: &[u8], pred: &[u8], num_classes: usize) -> Result<f64> {
    Ok(Confusion::from_labels(truth, pred, num_classes)?.f1_macro())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::models::recon_loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn ssim_of_identical_images_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..784).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ta = t(&a);
        assert_eq!(ssim(&ta, &ta).unwrap(), 1.0);
    }

    #[test]
    fn ssim_matches_a_frozen_value() {
        let a = t(&[0.0, 0.5, 1.0, 0.25]);
        let b = t(&[0.1, 0.4, 0.9, 0.35]);
        let got = ssim(&a, &b).unwrap();
        assert!((got - 0.954_921_958_640_897_24).abs() < 1e-12, "{got}");
        let m = mse(&a, &b).unwrap();
        assert!((m - 0.01).abs() < 1e-15, "{m}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = t(&(0..64).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>());
        let b = t(&(0..64).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>());
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() <= 1e-15, "{ab} vs {ba}");
        assert!(ab < 1.0);
    }

    #[test]
    fn ssim_agrees_with_raw_moment_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
        let n = a.len() as f64;
        // Independent path: E[x^2] - mu^2 moments instead of centered sums.
        let mu_a = a.iter().sum::<f64>() / n;
        let mu_b = b.iter().sum::<f64>() / n;
        let va = a.iter().map(|x| x * x).sum::<f64>() / n - mu_a * mu_a;
        let vb = b.iter().map(|x| x * x).sum::<f64>() / n - mu_b * mu_b;
        let cov = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n - mu_a * mu_b;
        let want = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (va + vb + SSIM_C2));
        let got = ssim(&t(&a), &t(&b)).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn mse_matches_training_reconstruction_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[1, 32], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[1, 32], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let loss = recon_loss(&mut g, xv, yv).unwrap();
        let want = g.value(loss).item();
        let got = mse(&x, &y).unwrap();
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn shape_mismatch_and_empty_inputs_are_rejected() {
        let a = t(&[0.0, 1.0]);
        let b = t(&[0.0, 1.0, 2.0]);
        assert!(ssim(&a, &b).is_err());
        let e1 = Tensor::<f64>::new(&[0], vec![]).unwrap();
        let e2 = Tensor::<f64>::new(&[0], vec![]).unwrap();
        assert!(matches!(ssim(&e1, &e2), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn report_summarizes_with_population_statistics() {
        let x = Tensor::<f64>::new(&[2, 2], vec![0.0, 1.0, 0.5, 0.5]).unwrap();
        let xhat = x.clone();
        let r = evaluate_reconstructions(&x, &xhat).unwrap();
        assert_eq!(r.ssim, vec![1.0, 1.0]);
        assert_eq!(r.mse, vec![0.0, 0.0]);
        assert_eq!(r.ssim_mean, 1.0);
        assert_eq!(r.ssim_std, 0.0);

        let y = Tensor::<f64>::new(&[2, 2], vec![0.1, 1.0, 0.5, 0.7]).unwrap();
        let r2 = evaluate_reconstructions(&x, &y).unwrap();
        // per-image mse: [0.005, 0.02]; population std = 0.0075
        assert!((r2.mse[0] - 0.005).abs() < 1e-15);
        assert!((r2.mse[1] - 0.02).abs() < 1e-15);
        assert!((r2.mse_mean - 0.0125).abs() < 1e-15);
        assert!((r2.mse_std - 0.0075).abs() < 1e-15);
    }

    #[test]
    fn binary_f1_counting_case() {
        // class 1: TP=1 FN=1 FP=1 -> 0.5; class 0: TP=0 FN=1 FP=1 -> 0.
        let truth = [1u8, 1, 0];
        let pred = [1u8, 0, 1];
        let c = Confusion::from_labels(&truth, &pred, 2).unwrap();
        assert_eq!(c.f1_per_class(), vec![0.0, 0.5]);
        assert!((f1_macro(&truth, &pred, 2).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_score_one_per_present_class() {
        let truth = [0u8, 1, 2, 1, 0];
        let c = Confusion::from_labels(&truth, &truth, 3).unwrap();
        assert_eq!(c.f1_per_class(), vec![1.0, 1.0, 1.0]);
        assert_eq!(c.f1_macro(), 1.0);
    }

    #[test]
    fn absent_class_contributes_zero_to_the_macro_average() {
        // class 2 never occurs in truth or predictions.
        let truth = [0u8, 1, 0, 1];
        let pred = [0u8, 1, 0, 1];
        let got = f1_macro(&truth, &pred, 3).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-15, "{got}");
    }

    #[test]
    fn confusion_counts_match_a_brute_force_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth: Vec<u8> = (0..500).map(|_| rng.gen_range(0..10)).collect();
        let pred: Vec<u8> = (0..500).map(|_| rng.gen_range(0..10)).collect();
        let c = Confusion::from_labels(&truth, &pred, 10).unwrap();
        for t_class in 0..10 {
            for p_class in 0..10 {
                let want = truth
                    .iter()
                    .zip(&pred)
                    .filter(|&(&t, &p)| t as usize == t_class && p as usize == p_class)
                    .count() as u64;
                assert_eq!(c.count(t_class, p_class), want);
            }
        }

        // Independent per-class F1 from raw labels.
        for cls in 0..10u8 {
            let tp = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t == cls && p == cls)
                .count() as f64;
            let fp = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t != cls && p == cls)
                .count() as f64;
            let fn_ = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t == cls && p != cls)
                .count() as f64;
            let want = if tp + fp + fn_ == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            };
            let got = c.f1_per_class()[cls as usize];
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn macro_f1_is_invariant_to_sample_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth: Vec<u8> = (0..200).map(|_| rng.gen_range(0..10)).collect();
        let pred: Vec<u8> = (0..200).map(|_| rng.gen_range(0..10)).collect();
        let base = f1_macro(&truth, &pred, 10).unwrap();

        let mut order: Vec<usize> = (0..200).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let st: Vec<u8> = order.iter().map(|&i| truth[i]).collect();
        let sp: Vec<u8> = order.iter().map(|&i| pred[i]).collect();
        assert_eq!(f1_macro(&st, &sp, 10).unwrap(), base);
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let err = Confusion::from_labels(&[3u8], &[1u8], 3).unwrap_err();
        assert!(matches!(
            err,
            Error::LabelRange {
                label: 3,
                num_classes: 3
            }
        ));
        assert!(Confusion::from_labels(&[], &[], 10).is_err());
        assert!(Confusion::from_labels(&[1u8], &[1u8, 2], 10).is_err());
    }
}
