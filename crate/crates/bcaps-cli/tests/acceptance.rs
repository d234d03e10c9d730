//! Acceptance suite for the experiment pipeline, numbered a1..a9. The
//! desk-scale checks (a5..a7) share one fixture: eight 20-epoch trainings on
//! the first 10,000 train images, built once through the real binary and
//! evaluated on the full test set. Expect tens of minutes on one core.
//!
//! Needs the MNIST IDX files in `data/mnist/` at the workspace root, or a
//! directory named by `BCAPS_DATA_DIR`.

use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use bcaps::capsules::{route, squash_tensor};
use bcaps::checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint};
use bcaps::dataio::{load_dataset, parse_idx, serialize_idx, to_dataset, IdxFile, Split};
use bcaps::metrics::{f1_macro, mse, ssim, Confusion};
use bcaps::models::{BCapsConfig, ModelConfig, SamplingStrategy};
use bcaps::train::{init_state, train_epochs, Precision, TrainConfig};
use bcaps::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_bcaps")
}

fn data_dir() -> PathBuf {
    match std::env::var_os("BCAPS_DATA_DIR") {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

fn run<I, S>(args: I) -> (i32, String, String)
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let out = Command::new(bin()).args(args).output().expect("spawn bcaps");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Field `col` of the first CSV row whose leading field is `key`.
fn csv_field(path: &Path, key: &str, col: usize) -> f64 {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.first() == Some(&key) {
            return fields[col].parse().expect("numeric field");
        }
    }
    panic!("no row '{key}' in {}", path.display());
}

fn final_total_loss(run_dir: &Path) -> f64 {
    let text = fs::read_to_string(run_dir.join("history.csv")).unwrap();
    let last = text.lines().last().expect("nonempty history");
    last.split(',').nth(3).unwrap().parse().expect("total loss")
}

#[test]
fn a1_parameter_counts_match_reference_architectures() {
    let params_of = |args: &[&str]| -> u64 {
        let mut full = vec!["params"];
        full.extend_from_slice(args);
        let (code, out, err) = run(&full);
        assert_eq!(code, 0, "params {args:?} failed: {err}");
        out.trim().parse().expect("integer count")
    };
    let exact = params_of(&["--model", "bcaps", "--caps", "8", "--desc", "64", "--latent", "2"]);
    assert_eq!(exact, 532_480);

    // Cells are printed in thousands with mixed flooring and rounding;
    // accept a count when either reproduces the cell.
    let matches_k =
        |count: u64, cell_k: u64| count / 1000 == cell_k || (count + 500) / 1000 == cell_k;
    for (l, b512, b1024, bcaps_k) in [
        (2u32, 405, 810, 532),
        (4, 407, 814, 663),
        (6, 409, 818, 794),
        (8, 411, 822, 925),
        (10, 413, 826, 1050),
    ] {
        let ls = l.to_string();
        let v512 = params_of(&["--model", "vae", "--hidden", "512", "--latent", &ls]);
        assert!(matches_k(v512, b512), "vae 512 L={l}: {v512}");
        let v1024 = params_of(&["--model", "vae", "--hidden", "1024", "--latent", &ls]);
        assert!(matches_k(v1024, b1024), "vae 1024 L={l}: {v1024}");
        let bc = params_of(&["--model", "bcaps", "--caps", "8", "--desc", "64", "--latent", &ls]);
        if l == 10 {
            // printed as 1.05M, a 10K-resolution cell
            assert!(
                bc / 10_000 == bcaps_k / 10 || (bc + 5_000) / 10_000 == bcaps_k / 10,
                "bcaps L=10: {bc}"
            );
        } else {
            assert!(matches_k(bc, bcaps_k), "bcaps L={l}: {bc}");
        }
    }
    println!("a1 parameter counts: PASS");
}

#[test]
fn a2_gradient_suite_green_and_corrupt_hook_red() {
    let (code, out, err) = run(["gradcheck"]);
    assert_eq!(code, 0, "gradcheck failed:\n{out}\n{err}");
    assert!(out.contains("capsule model end-to-end"), "missing model entry");
    assert!(out.contains("baseline model end-to-end"), "missing model entry");
    let (code, _, _) = run(["gradcheck", "--corrupt-gradient"]);
    assert_eq!(code, 1, "corrupt hook must fail the run");
    println!("a2 gradient suite: PASS");
}

#[test]
fn a3_capsule_invariants_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (batch, ni, nj, dj) = (3, 4, 5, 6);
    let uhat_t = Tensor::<f64>::randn(&[batch, ni, nj, dj], 1.0, &mut rng);

    // couplings lie on the parent simplex; one iteration means uniform
    for iters in [1usize, 2, 3, 5] {
        let mut g = Graph::new();
        let uhat = g.constant(uhat_t.clone());
        let (_, state) = route(&mut g, uhat, iters, None).unwrap();
        for row in state.couplings.data().chunks(nj) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9, "iters {iters}: row sum {sum}");
            if iters == 1 {
                for &k in row {
                    assert!((k - 1.0 / nj as f64).abs() <= 1e-12);
                }
            }
        }
    }

    // squash keeps vectors inside the unit ball without turning them
    let s = Tensor::<f64>::randn(&[4, 3, 7], 1.5, &mut rng);
    let v = squash_tensor(&s);
    for (sv, vv) in s.data().chunks(7).zip(v.data().chunks(7)) {
        let sn: f64 = sv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vn: f64 = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(vn < 1.0, "norm {vn}");
        if sn > 1e-6 {
            let coef = vn / sn;
            for (a, b) in sv.iter().zip(vv) {
                assert!((a * coef - b).abs() <= 1e-9 * (1.0 + a.abs()), "direction");
            }
        }
    }

    // predictions match the naive quadruple loop exactly
    let (b2, ni2, nj2, di2, dj2) = (2, 3, 4, 5, 6);
    let u = Tensor::<f64>::randn(&[b2, ni2, di2], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[ni2, nj2, di2, dj2], 1.0, &mut rng);
    let mut got = vec![0.0; b2 * ni2 * nj2 * dj2];
    bcaps::kernels::caps_predict(b2, ni2, nj2, di2, dj2, u.data(), w.data(), &mut got);
    for b in 0..b2 {
        for i in 0..ni2 {
            for j in 0..nj2 {
                for d in 0..dj2 {
                    let mut acc = 0.0;
                    for e in 0..di2 {
                        acc += u.data()[(b * ni2 + i) * di2 + e]
                            * w.data()[((i * nj2 + j) * di2 + e) * dj2 + d];
                    }
                    assert_eq!(got[((b * ni2 + i) * nj2 + j) * dj2 + d], acc);
                }
            }
        }
    }
    println!("a3 capsule invariants: PASS");
}

#[test]
fn a4_metric_identities_hold() {
    let a = Tensor::<f64>::new(&[8], vec![0.0, 0.1, 0.25, 0.4, 0.55, 0.7, 0.85, 1.0]).unwrap();
    let b = Tensor::<f64>::new(&[8], vec![0.05, 0.2, 0.2, 0.35, 0.6, 0.65, 0.9, 0.95]).unwrap();
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
    assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);

    let truth = [0u8, 0, 1, 1, 2, 2, 2, 0, 1, 2];
    let pred = [0u8, 1, 1, 1, 2, 0, 2, 0, 2, 2];
    let mut tp = [0.0f64; 3];
    let mut fp = [0.0f64; 3];
    let mut fal = [0.0f64; 3];
    for (t, p) in truth.iter().zip(&pred) {
        if t == p {
            tp[*t as usize] += 1.0;
        } else {
            fp[*p as usize] += 1.0;
            fal[*t as usize] += 1.0;
        }
    }
    let mut expect = 0.0;
    for c in 0..3 {
        let denom = 2.0 * tp[c] + fp[c] + fal[c];
        expect += if denom == 0.0 { 0.0 } else { 2.0 * tp[c] / denom };
    }
    expect /= 3.0;
    let conf = Confusion::from_labels(&truth, &pred, 3).unwrap();
    assert_eq!(conf.f1_macro(), expect);
    assert_eq!(f1_macro(&truth, &pred, 3).unwrap(), expect);
    println!("a4 metric identities: PASS");
}

/// Shared desk-scale fixture for a5..a7.
struct Desk {
    /// Mean test-set SSIM at L = 2, 6, 10.
    vae_ssim: [f64; 3],
    bcaps_ssim: [f64; 3],
    /// Final total losses of the three sampling strategies at L = 2.
    dd_total: f64,
    shifted_total: f64,
    standard_exit: i32,
    standard_total: Option<f64>,
    /// Macro F1 on reconstructions at L = 10.
    vae_f1: f64,
    bcaps_f1: f64,
}

static DESK: OnceLock<Desk> = OnceLock::new();

fn desk() -> &'static Desk {
    DESK.get_or_init(build_desk)
}

fn build_desk() -> Desk {
    let data = data_dir();
    assert!(
        data.is_dir(),
        "needs MNIST IDX files in {} (or set BCAPS_DATA_DIR)",
        data.display()
    );
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).unwrap();

    let train = |name: &str, model_args: &[&str]| -> i32 {
        let out = root.join(name);
        let mut args: Vec<String> = [
            "train",
            "--data",
            data.to_str().unwrap(),
            "--subset",
            "10000",
            "--epochs",
            "20",
            "--seed",
            "0",
            "--out",
            out.to_str().unwrap(),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        args.extend(model_args.iter().map(|s| s.to_string()));
        let (code, _, err) = run(&args);
        assert!(
            code == 0 || code == 3,
            "train {name} exited {code}:\n{err}"
        );
        code
    };
    let eval_ssim = |name: &str| -> f64 {
        let dir = root.join(name);
        let (code, _, err) = run([
            "eval",
            "--checkpoint",
            dir.join("checkpoint.ckpt").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            dir.join("eval").to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "eval {name}: {err}");
        csv_field(&dir.join("eval/metrics.csv"), "mean", 2)
    };
    let classify_f1 = |name: &str| -> f64 {
        let dir = root.join(name);
        let (code, _, err) = run([
            "classify",
            "--checkpoint",
            dir.join("checkpoint.ckpt").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--subset",
            "10000",
            "--out",
            dir.join("clf").to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "classify {name}: {err}");
        csv_field(&dir.join("clf/f1.csv"), "macro", 1)
    };

    let vae = |l: &'static str| vec!["--model", "vae", "--hidden", "512", "--latent", l];
    let bc = |l: &'static str, s: &'static str| {
        vec![
            "--model", "bcaps", "--caps", "8", "--desc", "64", "--latent", l, "--sampling", s,
        ]
    };

    let mut vae_ssim = [0.0; 3];
    let mut bcaps_ssim = [0.0; 3];
    for (i, l) in ["2", "6", "10"].into_iter().enumerate() {
        let name = format!("vae-l{l}");
        assert_eq!(train(&name, &vae(l)), 0, "baseline run diverged");
        vae_ssim[i] = eval_ssim(&name);
        let name = format!("bcaps-l{l}");
        assert_eq!(train(&name, &bc(l, "data-driven")), 0, "capsule run diverged");
        bcaps_ssim[i] = eval_ssim(&name);
    }

    let dd_total = final_total_loss(&root.join("bcaps-l2"));
    assert_eq!(train("bcaps-l2-shifted", &bc("2", "shifted-normal")), 0);
    let shifted_total = final_total_loss(&root.join("bcaps-l2-shifted"));
    let standard_exit = train("bcaps-l2-standard", &bc("2", "standard-normal"));
    let standard_total =
        (standard_exit == 0).then(|| final_total_loss(&root.join("bcaps-l2-standard")));

    let vae_f1 = classify_f1("vae-l10");
    let bcaps_f1 = classify_f1("bcaps-l10");

    Desk {
        vae_ssim,
        bcaps_ssim,
        dd_total,
        shifted_total,
        standard_exit,
        standard_total,
        vae_f1,
        bcaps_f1,
    }
}

#[test]
fn a5_reconstruction_quality_tracks_baseline_across_latent_sizes() {
    let d = desk();
    println!(
        "mean test ssim: vae {:?} bcaps {:?} (L = 2, 6, 10)",
        d.vae_ssim, d.bcaps_ssim
    );
    assert!(
        d.bcaps_ssim[0] >= d.vae_ssim[0] - 0.02,
        "L=2: bcaps {} vs vae {}",
        d.bcaps_ssim[0],
        d.vae_ssim[0]
    );
    assert!(
        d.bcaps_ssim[2] >= d.vae_ssim[2] + 0.01,
        "L=10: bcaps {} vs vae {}",
        d.bcaps_ssim[2],
        d.vae_ssim[2]
    );
    println!("a5 reconstruction trend: PASS");
}

#[test]
fn a6_sampling_strategies_order_by_final_loss() {
    let d = desk();
    println!(
        "final totals at L=2: data-driven {} shifted {} standard {:?} (exit {})",
        d.dd_total, d.shifted_total, d.standard_total, d.standard_exit
    );
    assert!(
        d.dd_total <= d.shifted_total,
        "data-driven {} vs shifted {}",
        d.dd_total,
        d.shifted_total
    );
    match d.standard_total {
        None => assert_eq!(d.standard_exit, 3, "halt must report divergence"),
        Some(t) => assert!(t >= d.dd_total, "standard {t} vs data-driven {}", d.dd_total),
    }
    println!("a6 sampling ordering: PASS");
}

#[test]
fn a7_capsule_reconstructions_classify_better_at_high_latent_dim() {
    let d = desk();
    println!("macro f1 at L=10: vae {} bcaps {}", d.vae_f1, d.bcaps_f1);
    assert!(
        d.bcaps_f1 > d.vae_f1,
        "bcaps {} vs vae {}",
        d.bcaps_f1,
        d.vae_f1
    );
    println!("a7 classification trend: PASS");
}

#[test]
fn a8_determinism_and_checkpoint_persistence() {
    let data = data_dir();
    assert!(data.is_dir(), "needs MNIST IDX files in {}", data.display());
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-aux");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).unwrap();

    // identical seeds, identical history bytes
    let micro = |out: &Path| {
        let (code, _, err) = run([
            "train",
            "--model",
            "bcaps",
            "--caps",
            "4",
            "--desc",
            "16",
            "--latent",
            "2",
            "--d1",
            "8",
            "--dec-hidden",
            "64",
            "--epochs",
            "2",
            "--subset",
            "256",
            "--seed",
            "7",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "micro train: {err}");
    };
    micro(&root.join("r1"));
    micro(&root.join("r2"));
    let h1 = fs::read(root.join("r1/history.csv")).unwrap();
    let h2 = fs::read(root.join("r2/history.csv")).unwrap();
    assert_eq!(h1, h2, "same seed must give identical history bytes");

    // checkpoint round trip is bit-exact
    let ckpt = root.join("r1/checkpoint.ckpt");
    let (state, tcfg) = load_checkpoint::<f32>(&ckpt).unwrap();
    assert_eq!(
        checkpoint_bytes(&state, &tcfg).unwrap(),
        fs::read(&ckpt).unwrap()
    );

    // resuming from a mid-run checkpoint matches the uninterrupted run (f64)
    let ds = load_dataset::<f64>(&data, Split::Train).unwrap().subset(192);
    let mcfg = ModelConfig::Bcaps(BCapsConfig {
        input_dim: 784,
        c: 2,
        d: 8,
        l: 2,
        d1: 4,
        routing_iters: 2,
        use_capsule_batchnorm: true,
        dec_hidden: 32,
        sampling: SamplingStrategy::DataDriven,
    });
    let tc = TrainConfig {
        batch_size: 64,
        epochs: 2,
        seed: 11,
        precision: Precision::F64,
        ..TrainConfig::default()
    };
    let (full, _) = bcaps::train::train::<f64>(&mcfg, &ds, &tc).unwrap();

    let mut st = init_state::<f64>(&mcfg, &tc).unwrap();
    train_epochs(&mut st, &ds, &tc, 1, &mut |_, _| Ok(())).unwrap();
    let mid = root.join("mid.ckpt");
    save_checkpoint(&st, &tc, &mid).unwrap();
    let (mut resumed, tc2) = load_checkpoint::<f64>(&mid).unwrap();
    train_epochs(&mut resumed, &ds, &tc2, 1, &mut |_, _| Ok(())).unwrap();

    for (a, b) in full.model.params().iter().zip(resumed.model.params().iter()) {
        assert_eq!(a.data(), b.data(), "resumed parameters drifted");
    }
    for (a, b) in full.model.extras().iter().zip(resumed.model.extras().iter()) {
        assert_eq!(a.data(), b.data(), "resumed running stats drifted");
    }
    println!("a8 determinism and persistence: PASS");
}

#[test]
fn a9_idx_parsing_and_real_dataset_sizes() {
    // hand-built pair: two 2x2 images, two labels
    let img = IdxFile {
        magic: 0x0803,
        dims: vec![2, 2, 2],
        payload: vec![0, 51, 102, 153, 204, 255, 10, 20],
    };
    let lbl = IdxFile {
        magic: 0x0801,
        dims: vec![2],
        payload: vec![3, 9],
    };
    let img2 = parse_idx(&serialize_idx(&img)).unwrap();
    assert_eq!(img2.magic, 0x0803);
    assert_eq!(img2.dims, vec![2, 2, 2]);
    assert_eq!(img2.payload, img.payload);
    let ds = to_dataset::<f64>(&img2, &parse_idx(&serialize_idx(&lbl)).unwrap()).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.image_dim(), 4);
    assert_eq!(ds.images.data()[1], 51.0 / 255.0);
    assert_eq!(ds.labels, vec![3, 9]);

    let mut bad = serialize_idx(&img);
    bad[2] = 0x07;
    assert!(parse_idx(&bad).is_err(), "wrong type byte must be rejected");

    let data = data_dir();
    assert!(data.is_dir(), "needs MNIST IDX files in {}", data.display());
    let train = load_dataset::<f32>(&data, Split::Train).unwrap();
    let test = load_dataset::<f32>(&data, Split::Test).unwrap();
    assert_eq!(train.len(), 60_000);
    assert_eq!(test.len(), 10_000);
    assert_eq!(train.image_dim(), 784);
    println!("a9 idx parsing: PASS");
}
