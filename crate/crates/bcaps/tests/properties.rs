//! Randomized invariants over the numeric core: simplex structure of
//! softmax/routing, squash geometry, kernel parity, format round trips, and
//! metric symmetries.

use bcaps::capsules::{caps_norm, route, squash_tensor};
use bcaps::dataio::{parse_idx, serialize_idx, IdxFile};
use bcaps::graph::{softmax_tensor, Graph};
use bcaps::kernels;
use bcaps::metrics::{f1_macro, mse, ssim};
use bcaps::tensor::Tensor;
use proptest::collection::vec;
use proptest::prelude::*;

fn finite_vec(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    vec(lo..hi, len)
}

proptest! {
    #[test]
    fn softmax_rows_lie_on_the_simplex(
        r in 1usize..4,
        c in 1usize..6,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let t = Tensor::new(&[r, c], data).unwrap();
        let sm = softmax_tensor(&t, 1);
        for row in sm.data().chunks_exact(c) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9, "row sum {sum}");
            for &p in row {
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn squash_stays_inside_the_unit_ball_and_keeps_direction(
        data in finite_vec(4, -5.0, 5.0),
    ) {
        let s = Tensor::new(&[1, 4], data.clone()).unwrap();
        let v = squash_tensor(&s);
        let norm_v: f64 = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm_v < 1.0, "squashed norm {norm_v}");

        // Collinearity with a nonnegative coefficient.
        let norm_s: f64 = data.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm_s > 1e-6 {
            let coef = norm_v / norm_s;
            for (&sv, &vv) in data.iter().zip(v.data()) {
                prop_assert!((vv - coef * sv).abs() <= 1e-9 * (1.0 + sv.abs()));
            }
        }
    }

    #[test]
    fn routing_couplings_stay_on_the_parent_simplex(
        batch in 1usize..3,
        ni in 1usize..4,
        nj in 1usize..4,
        dj in 1usize..4,
        iters in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..batch * ni * nj * dj)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let uhat_t = Tensor::new(&[batch, ni, nj, dj], data).unwrap();
        let mut g = Graph::new();
        let uhat = g.constant(uhat_t);
        let (_, state) = route(&mut g, uhat, iters, None).unwrap();
        for group in state.couplings.data().chunks_exact(nj) {
            let sum: f64 = group.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9, "coupling sum {sum}");
        }
    }

    #[test]
    fn one_routing_iteration_means_uniform_couplings(
        batch in 1usize..3,
        ni in 1usize..4,
        nj in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dj = 3;
        let data: Vec<f64> = (0..batch * ni * nj * dj)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let uhat_t = Tensor::new(&[batch, ni, nj, dj], data).unwrap();
        let mut g = Graph::new();
        let uhat = g.constant(uhat_t);
        let (_, state) = route(&mut g, uhat, 1, None).unwrap();
        let want = 1.0 / nj as f64;
        for &k in state.couplings.data() {
            prop_assert!((k - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn capsule_predictions_match_naive_loops(
        batch in 1usize..3,
        ni in 1usize..3,
        nj in 1usize..3,
        di in 1usize..4,
        dj in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..batch * ni * di).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..ni * nj * di * dj).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut got = vec![0.0f64; batch * ni * nj * dj];
        kernels::caps_predict(batch, ni, nj, di, dj, &u, &w, &mut got);

        for b in 0..batch {
            for i in 0..ni {
                for j in 0..nj {
                    for d in 0..dj {
                        let mut acc = 0.0f64;
                        for e in 0..di {
                            acc += u[(b * ni + i) * di + e]
                                * w[((i * nj + j) * di + e) * dj + d];
                        }
                        let idx = ((b * ni + i) * nj + j) * dj + d;
                        prop_assert_eq!(got[idx], acc, "entry ({},{},{},{})", b, i, j, d);
                    }
                }
            }
        }
    }

    #[test]
    #[cfg(feature = "parallel")]
    fn parallel_and_sequential_kernels_agree_bitwise(
        m in 1usize..6,
        k in 1usize..6,
        n in 1usize..6,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut c_seq = vec![0.0f64; m * n];
        let mut c_par = vec![0.0f64; m * n];
        kernels::matmul_seq(m, k, n, &a, &b, &mut c_seq);
        kernels::matmul_par(m, k, n, &a, &b, &mut c_par);
        prop_assert_eq!(&c_seq, &c_par);

        let (batch, ni, nj, dj) = (2, m.min(3), k.min(3), n.min(3));
        let kc: Vec<f64> = (0..batch * ni * nj).map(|_| rng.gen_range(0.0..1.0)).collect();
        let uh: Vec<f64> = (0..batch * ni * nj * dj).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut s_seq = vec![0.0f64; batch * nj * dj];
        let mut s_par = vec![0.0f64; batch * nj * dj];
        kernels::route_sum_seq(batch, ni, nj, dj, &kc, &uh, &mut s_seq);
        kernels::route_sum_par(batch, ni, nj, dj, &kc, &uh, &mut s_par);
        prop_assert_eq!(&s_seq, &s_par);
    }

    #[test]
    fn idx_serialization_round_trips(
        images in any::<bool>(),
        d0 in 1u32..5,
        d1 in 1u32..5,
        d2 in 1u32..5,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // Only the two MNIST record kinds exist: rank-1 labels, rank-3 images.
        let rank = if images { 3 } else { 1 };
        let dims: Vec<u32> = [d0, d1, d2][..rank].to_vec();
        let len: usize = dims.iter().map(|&d| d as usize).product();
        let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let idx = IdxFile {
            magic: 0x0000_0800 | rank as u32,
            dims: dims.clone(),
            payload: payload.clone(),
        };
        let bytes = serialize_idx(&idx);
        let back = parse_idx(&bytes).unwrap();
        prop_assert_eq!(back.magic, idx.magic);
        prop_assert_eq!(back.dims, dims);
        prop_assert_eq!(back.payload, payload);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded_on_unit_range(
        a in finite_vec(16, 0.0, 1.0),
        b in finite_vec(16, 0.0, 1.0),
    ) {
        let ta = Tensor::new(&[16], a).unwrap();
        let tb = Tensor::new(&[16], b).unwrap();
        let ab = ssim(&ta, &tb).unwrap();
        let ba = ssim(&tb, &ta).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab), "ssim {ab}");
        prop_assert_eq!(ssim(&ta, &ta).unwrap(), 1.0);
    }

    #[test]
    fn mse_is_nonnegative_and_zero_only_on_identity(
        a in finite_vec(8, 0.0, 1.0),
        bump in 1e-6f64..1.0,
        at in 0usize..8,
    ) {
        let ta = Tensor::new(&[8], a.clone()).unwrap();
        prop_assert_eq!(mse(&ta, &ta).unwrap(), 0.0);
        let mut b = a;
        b[at] += bump;
        let tb = Tensor::new(&[8], b).unwrap();
        prop_assert!(mse(&ta, &tb).unwrap() > 0.0);
    }

    #[test]
    fn f1_is_invariant_under_sample_permutation(
        pairs in vec((0u8..10, 0u8..10), 1..60),
        rot in 0usize..59,
    ) {
        let truth: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let base = f1_macro(&truth, &pred, 10).unwrap();
        let n = pairs.len();
        let shift = rot % n;
        let rt: Vec<u8> = (0..n).map(|i| truth[(i + shift) % n]).collect();
        let rp: Vec<u8> = (0..n).map(|i| pred[(i + shift) % n]).collect();
        prop_assert_eq!(f1_macro(&rt, &rp, 10).unwrap(), base);
    }

    #[test]
    fn squashed_capsule_norms_land_in_the_unit_interval(
        batch in 1usize..3,
        caps in 1usize..4,
        dim in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..batch * caps * dim)
            .map(|_| rng.gen_range(-3.0..3.0))
            .collect();
        let t = squash_tensor(&Tensor::new(&[batch, caps, dim], data).unwrap());
        let mut g = Graph::new();
        let u = g.constant(t);
        let norms = caps_norm(&mut g, u).unwrap();
        for &v in g.value(norms).data() {
            prop_assert!((0.0..1.0).contains(&v), "norm {v}");
        }
    }
}
