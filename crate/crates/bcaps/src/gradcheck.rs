//! Central-difference gradient checking. Everything runs in f64; the checked
//! closure must be deterministic (all randomness and routing couplings frozen
//! by the caller).

use crate::error::Result;
use crate::graph::{softmax_tensor, Graph, VarId};
use crate::models::{model_grad_err, BCapsConfig, BaselineVaeConfig, ModelConfig, SamplingStrategy};
use crate::tensor::Tensor;

/// Denominator floor of the relative error: entries where both gradients sit
/// below this are held to absolute agreement of floor·tol instead. Central
/// differences of an O(1) loss carry ~ULP/2h ≈ 5e-12 of rounding noise at
/// h=1e-5, so a near-zero true gradient cannot be resolved more finely; a
/// smaller floor turns that noise into spurious relative error.
const DENOM_FLOOR: f64 = 1e-6;

/// Thresholds for the release-gate sweep: individual ops against central
/// differences, and the two full models end to end.
pub const OP_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-4;

/// Max over entries of |analytic − central difference| /
/// max(|analytic|, |numeric|, 1e-12) for a scalar-valued `f` of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, VarId) -> Result<VarId>,
{
    grad_check_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        eps,
    )
}

/// Multi-input variant: `f` receives one var per input tensor, in order, and
/// returns a scalar. The reported error is the max over every entry of every
/// input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[VarId]) -> Result<VarId>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<VarId> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        Ok(g.value(y).item())
    };

    // Analytic gradients in one pass.
    let mut g = Graph::new();
    let vars: Vec<VarId> = inputs.iter().map(|t| g.var(t.clone(), true)).collect();
    let y = f(&mut g, &vars)?;
    g.backward(y)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for ti in 0..inputs.len() {
        for e in 0..inputs[ti].numel() {
            let orig = work[ti].data()[e];
            work[ti].data_mut()[e] = orig + eps;
            let fp = eval(&work)?;
            work[ti].data_mut()[e] = orig - eps;
            let fm = eval(&work)?;
            work[ti].data_mut()[e] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub err: f64,
    pub tol: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.err <= self.tol
    }
}

/// The finite-difference sweep behind the release gate: every tensor op at a
/// random micro-scale point, then both full models. Probe losses multiply by
/// fixed random weights first; an unweighted Σy² is nearly invariant to the
/// input for normalizing ops, which turns the relative error into 0/0 noise.
/// `corrupt` appends a deliberately failing entry to exercise the caller's
/// failure path.
pub fn gradient_suite(corrupt: bool) -> Result<Vec<SuiteEntry>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(71);

    let mut rand_t = |shape: &[usize], lo: f64, hi: f64| -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
            .expect("suite tensor shape")
    };

    let a = rand_t(&[2, 3], -1.0, 1.0);
    let b = rand_t(&[2, 3], 0.3, 1.5);
    let w23 = rand_t(&[2, 3], -1.0, 1.0);
    let wsum = move |g: &mut Graph<f64>, y: VarId, w: &Tensor<f64>| -> Result<VarId> {
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv)?;
        Ok(g.sum(p))
    };

    let mut out = Vec::new();
    {
        let w = w23.clone();
        out.push(SuiteEntry {
            name: "add",
            err: grad_check_many(
                |g, v| {
                    let y = g.add(v[0], v[1])?;
                    wsum(g, y, &w)
                },
                &[a.clone(), b.clone()],
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let w = w23.clone();
        out.push(SuiteEntry {
            name: "sub",
            err: grad_check_many(
                |g, v| {
                    let y = g.sub(v[0], v[1])?;
                    wsum(g, y, &w)
                },
                &[a.clone(), b.clone()],
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let w = w23.clone();
        out.push(SuiteEntry {
            name: "mul",
            err: grad_check_many(
                |g, v| {
                    let y = g.mul(v[0], v[1])?;
                    wsum(g, y, &w)
                },
                &[a.clone(), b.clone()],
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let w = w23.clone();
        out.push(SuiteEntry {
            name: "div",
            err: grad_check_many(
                |g, v| {
                    let y = g.div(v[0], v[1])?;
                    wsum(g, y, &w)
                },
                &[a.clone(), b.clone()],
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let w = w23.clone();
        out.push(SuiteEntry {
            name: "add_scalar",
            err: grad_check(
                |g, x| {
                    let y = g.add_scalar(x, 0.7);
                    wsum(g, y, &w)
                },
                &a,
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let w = w23.clone();
        out.push(SuiteEntry {
            name: "scale",
            err: grad_check(
                |g, x| {
                    let y = g.scale(x, -1.3);
                    wsum(g, y, &w)
                },
                &a,
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let w = w23.clone();
        out.push(SuiteEntry {
            name: "exp",
            err: grad_check(
                |g, x| {
                    let y = g.exp(x);
                    wsum(g, y, &w)
                },
                &a,
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let w = w23.clone();
        out.push(SuiteEntry {
            name: "sqrt",
            err: grad_check(
                |g, x| {
                    let y = g.sqrt(x)?;
                    wsum(g, y, &w)
                },
                &b,
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let w = w23.clone();
        out.push(SuiteEntry {
            name: "square",
            err: grad_check(
                |g, x| {
                    let y = g.square(x);
                    wsum(g, y, &w)
                },
                &a,
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let w = w23.clone();
        out.push(SuiteEntry {
            name: "sigmoid",
            err: grad_check(
                |g, x| {
                    let y = g.sigmoid(x);
                    wsum(g, y, &w)
                },
                &a,
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        // Inputs bounded away from the kink so central differences stay on
        // one branch.
        let signs = rand_t(&[2, 3], 0.0, 1.0);
        let mut kinked = rand_t(&[2, 3], 0.2, 1.0);
        for (v, s) in kinked.data_mut().iter_mut().zip(signs.data()) {
            if *s < 0.5 {
                *v = -*v;
            }
        }
        let w = w23.clone();
        out.push(SuiteEntry {
            name: "relu",
            err: grad_check(
                |g, x| {
                    let y = g.relu(x);
                    wsum(g, y, &w)
                },
                &kinked,
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let ma = rand_t(&[3, 3], -1.0, 1.0);
        let mb = rand_t(&[3, 3], -1.0, 1.0);
        let w = rand_t(&[3, 3], -1.0, 1.0);
        out.push(SuiteEntry {
            name: "matmul",
            err: grad_check_many(
                |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    wsum(g, y, &w)
                },
                &[ma, mb],
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    out.push(SuiteEntry {
        name: "sum",
        err: grad_check(
            |g, x| {
                let s = g.sum(x);
                Ok(g.square(s))
            },
            &a,
            1e-6,
        )?,
        tol: OP_TOL,
    });
    out.push(SuiteEntry {
        name: "mean",
        err: grad_check(
            |g, x| {
                let m = g.mean(x);
                Ok(g.square(m))
            },
            &a,
            1e-6,
        )?,
        tol: OP_TOL,
    });
    {
        let x = rand_t(&[3, 4], -1.0, 1.0);
        let w = rand_t(&[4], -1.0, 1.0);
        out.push(SuiteEntry {
            name: "sum_axis",
            err: grad_check(
                |g, x| {
                    let y = g.sum_axis(x, 0)?;
                    wsum(g, y, &w)
                },
                &x,
                1e-6,
            )?,
            tol: OP_TOL,
        });
        let w = rand_t(&[3], -1.0, 1.0);
        out.push(SuiteEntry {
            name: "mean_axis",
            err: grad_check(
                |g, x| {
                    let y = g.mean_axis(x, 1)?;
                    wsum(g, y, &w)
                },
                &x,
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let x = rand_t(&[2, 5], -1.0, 1.0);
        let w = rand_t(&[2, 5], -1.0, 1.0);
        out.push(SuiteEntry {
            name: "softmax",
            err: grad_check(
                |g, x| {
                    let y = g.softmax(x, 1)?;
                    wsum(g, y, &w)
                },
                &x,
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let x = rand_t(&[3, 4], -1.0, 1.0);
        let w = rand_t(&[3], -1.0, 1.0);
        out.push(SuiteEntry {
            name: "log_sum_exp",
            err: grad_check(
                |g, x| {
                    let y = g.log_sum_exp(x, 1)?;
                    wsum(g, y, &w)
                },
                &x,
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let w = rand_t(&[4, 3], -1.0, 1.0);
        out.push(SuiteEntry {
            name: "reshape",
            err: grad_check(
                |g, x| {
                    let r = g.reshape(x, &[4, 3])?;
                    let sq = g.square(r);
                    wsum(g, sq, &w)
                },
                &rand_t(&[2, 6], -1.0, 1.0),
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let base = rand_t(&[4], -1.0, 1.0);
        let w = rand_t(&[3, 4], -1.0, 1.0);
        out.push(SuiteEntry {
            name: "broadcast_prepend",
            err: grad_check(
                |g, x| {
                    let y = g.broadcast_prepend(x, 3);
                    let sq = g.square(y);
                    wsum(g, sq, &w)
                },
                &base,
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let u = rand_t(&[2, 2, 3], -1.0, 1.0);
        let wt = rand_t(&[2, 2, 3, 2], -1.0, 1.0);
        let w = rand_t(&[2, 2, 2, 2], -1.0, 1.0);
        out.push(SuiteEntry {
            name: "caps_predict",
            err: grad_check_many(
                |g, v| {
                    let y = g.caps_predict(v[0], v[1])?;
                    wsum(g, y, &w)
                },
                &[u, wt],
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let uhat = rand_t(&[2, 2, 2, 2], -1.0, 1.0);
        let logits = rand_t(&[2, 2, 2], -1.0, 1.0);
        let k = softmax_tensor(&logits, 2);
        let w = rand_t(&[2, 2, 2], -1.0, 1.0);
        out.push(SuiteEntry {
            name: "route_sum",
            err: grad_check(
                |g, x| {
                    let y = g.route_sum(x, k.clone())?;
                    wsum(g, y, &w)
                },
                &uhat,
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let s = rand_t(&[2, 2, 3], -1.0, 1.0);
        let w = rand_t(&[2, 2, 3], -1.0, 1.0);
        out.push(SuiteEntry {
            name: "squash",
            err: grad_check(
                |g, x| {
                    let y = g.squash(x)?;
                    wsum(g, y, &w)
                },
                &s,
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }
    {
        let s = rand_t(&[2, 3, 4], -1.0, 1.0);
        let w = rand_t(&[2, 3], -1.0, 1.0);
        out.push(SuiteEntry {
            name: "norm_last",
            err: grad_check(
                |g, x| {
                    let y = g.norm_last(x)?;
                    wsum(g, y, &w)
                },
                &s,
                1e-6,
            )?,
            tol: OP_TOL,
        });
    }

    let bcaps = ModelConfig::Bcaps(BCapsConfig {
        input_dim: 16,
        c: 2,
        d: 4,
        l: 2,
        d1: 3,
        routing_iters: 2,
        use_capsule_batchnorm: true,
        dec_hidden: 6,
        sampling: SamplingStrategy::DataDriven,
    });
    out.push(SuiteEntry {
        name: "capsule model end-to-end",
        err: model_grad_err(&bcaps, 72)?,
        tol: MODEL_TOL,
    });
    let vae = ModelConfig::Vae(BaselineVaeConfig {
        input_dim: 16,
        hidden: 8,
        l: 2,
        dec_hidden: 6,
        sampling: SamplingStrategy::StandardNormal,
    });
    out.push(SuiteEntry {
        name: "baseline model end-to-end",
        err: model_grad_err(&vae, 73)?,
        tol: MODEL_TOL,
    });

    if corrupt {
        out.push(SuiteEntry {
            name: "corrupted (test hook)",
            err: 1.0,
            tol: OP_TOL,
        });
    }
    Ok(out)
}
