//! CLI behavior: flag and config-file resolution, artifact layout, exit
//! codes, and cross-checks of command output against direct library calls.
//! Everything here runs on micro models in a few seconds.

use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use bcaps::classifier::{classify, train_classifier, ClassifierConfig};
use bcaps::dataio::load_dataset;
use bcaps::dataio::Split;
use bcaps::metrics::f1_macro;
use bcaps::models::{param_count, BCapsConfig, ModelConfig};

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

fn aux_root() -> &'static PathBuf {
    static ROOT: OnceLock<PathBuf> = OnceLock::new();
    ROOT.get_or_init(|| {
        let r = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/cli-tests");
        let _ = fs::remove_dir_all(&r);
        fs::create_dir_all(&r).unwrap();
        r
    })
}

/// One-epoch capsule checkpoint shared by the read-side tests.
fn micro_run() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let out = aux_root().join("micro");
        let (code, _, err) = run([
            "train",
            "--model",
            "bcaps",
            "--caps",
            "8",
            "--desc",
            "64",
            "--latent",
            "2",
            "--sampling",
            "data-driven",
            "--epochs",
            "1",
            "--subset",
            "256",
            "--seed",
            "3",
            "--data",
            data_dir().to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "micro train failed: {err}");
        out
    })
}

#[test]
fn train_smoke_writes_one_history_row_and_artifacts() {
    let dir = micro_run();
    let history = fs::read_to_string(dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2, "header plus one epoch row");
    assert!(history.starts_with("epoch,recon_loss,kl_loss,total_loss\n"));
    assert!(dir.join("checkpoint.ckpt").is_file());
    assert!(dir.join("original_grid.pgm").is_file());
    assert!(dir.join("recon_epoch_1.pgm").is_file());
}

#[test]
fn eval_writes_identical_csv_bytes_on_rerun() {
    let ckpt = micro_run().join("checkpoint.ckpt");
    let eval = |out: &Path| {
        let (code, stdout, err) = run([
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data_dir().to_str().unwrap(),
            "--test-subset",
            "64",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "eval failed: {err}");
        stdout
    };
    let e1 = aux_root().join("eval1");
    let e2 = aux_root().join("eval2");
    let out1 = eval(&e1);
    eval(&e2);
    assert_eq!(
        fs::read(e1.join("metrics.csv")).unwrap(),
        fs::read(e2.join("metrics.csv")).unwrap()
    );
    assert!(e1.join("original_grid.pgm").is_file());
    assert!(e1.join("recon_grid.pgm").is_file());
    assert!(out1.contains("n 64"));
    // 64 image rows, a mean row, a std row
    let lines = fs::read_to_string(e1.join("metrics.csv")).unwrap();
    assert_eq!(lines.lines().count(), 1 + 64 + 2);
}

#[test]
fn classify_confusion_totals_match_and_identity_stub_equals_raw_f1() {
    let ckpt = micro_run().join("checkpoint.ckpt");
    let out = aux_root().join("clf-stub");
    let (code, _, err) = run([
        "classify",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data_dir().to_str().unwrap(),
        "--subset",
        "512",
        "--test-subset",
        "256",
        "--identity-stub",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "classify failed: {err}");

    let confusion = fs::read_to_string(out.join("confusion.csv")).unwrap();
    let total: u64 = confusion
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1))
        .map(|v| v.parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 256, "confusion counts must cover every test image");

    let macro_row = fs::read_to_string(out.join("f1.csv")).unwrap();
    let cli_f1: f64 = macro_row
        .lines()
        .find(|l| l.starts_with("macro,"))
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();

    // With the identity stub the command scores original test images, so its
    // F1 must equal the classifier's raw-test F1 computed directly.
    let train = load_dataset::<f32>(&data_dir(), Split::Train)
        .unwrap()
        .subset(512);
    let test = load_dataset::<f32>(&data_dir(), Split::Test)
        .unwrap()
        .subset(256);
    let k = train
        .labels
        .iter()
        .chain(test.labels.iter())
        .copied()
        .max()
        .unwrap() as usize
        + 1;
    let cfg = ClassifierConfig {
        seed: 3, // the checkpoint's training seed
        ..ClassifierConfig::default()
    };
    let clf = train_classifier(&train.images, &train.labels, k, &cfg).unwrap();
    let pred = classify(&clf, &test.images).unwrap();
    let raw_f1 = f1_macro(&test.labels, &pred, k).unwrap();
    assert_eq!(cli_f1, raw_f1);
}

#[test]
fn export_latent_is_deterministic_and_classes_separate() {
    let ckpt = micro_run().join("checkpoint.ckpt");
    let export = |out: &Path| {
        let (code, _, err) = run([
            "export-latent",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data_dir().to_str().unwrap(),
            "--test-subset",
            "200",
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "export failed: {err}");
    };
    let e1 = aux_root().join("lat1");
    let e2 = aux_root().join("lat2");
    export(&e1);
    export(&e2);
    let text = fs::read_to_string(e1.join("latent.csv")).unwrap();
    assert_eq!(
        text,
        fs::read_to_string(e2.join("latent.csv")).unwrap(),
        "fixed seed must give identical bytes"
    );
    assert_eq!(text.lines().count(), 1 + 200);

    // class centroids must not all collapse to one point
    let mut sums = vec![(0.0f64, 0.0f64, 0u32); 10];
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (z1, z2): (f64, f64) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        let c: usize = f[2].parse().unwrap();
        sums[c].0 += z1;
        sums[c].1 += z2;
        sums[c].2 += 1;
    }
    let centroids: Vec<(f64, f64)> = sums
        .iter()
        .filter(|s| s.2 > 0)
        .map(|s| (s.0 / s.2 as f64, s.1 / s.2 as f64))
        .collect();
    let mut dist_sum = 0.0;
    let mut pairs = 0;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            let (dx, dy) = (centroids[i].0 - centroids[j].0, centroids[i].1 - centroids[j].1);
            dist_sum += (dx * dx + dy * dy).sqrt();
            pairs += 1;
        }
    }
    assert!(pairs > 0);
    assert!(dist_sum / pairs as f64 > 0.0, "centroids collapsed");
}

#[test]
fn export_latent_pads_a_single_latent_dimension() {
    let out = aux_root().join("l1");
    let (code, _, err) = run([
        "train",
        "--model",
        "bcaps",
        "--caps",
        "4",
        "--desc",
        "16",
        "--latent",
        "1",
        "--d1",
        "8",
        "--dec-hidden",
        "64",
        "--epochs",
        "1",
        "--subset",
        "128",
        "--data",
        data_dir().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let (code, _, err) = run([
        "export-latent",
        "--checkpoint",
        out.join("checkpoint.ckpt").to_str().unwrap(),
        "--data",
        data_dir().to_str().unwrap(),
        "--test-subset",
        "16",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(err.contains("first two"), "expected a dimension warning: {err}");
    let text = fs::read_to_string(out.join("latent.csv")).unwrap();
    for line in text.lines().skip(1) {
        assert_eq!(line.split(',').nth(1).unwrap(), "0.0000000000000000e0");
    }
}

#[test]
fn f64_checkpoints_dispatch_by_stored_precision() {
    let out = aux_root().join("f64");
    let (code, _, err) = run([
        "train",
        "--model",
        "vae",
        "--hidden",
        "32",
        "--latent",
        "2",
        "--dec-hidden",
        "32",
        "--precision",
        "f64",
        "--epochs",
        "1",
        "--subset",
        "128",
        "--data",
        data_dir().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let (code, stdout, err) = run([
        "eval",
        "--checkpoint",
        out.join("checkpoint.ckpt").to_str().unwrap(),
        "--data",
        data_dir().to_str().unwrap(),
        "--test-subset",
        "32",
        "--out",
        out.join("eval").to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("n 32"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let cfg = aux_root().join("arch.kv");
    fs::write(
        &cfg,
        "model = bcaps\ncaps = 4\ndesc = 16\nlatent = 6\n# trimmed model\nrouting_iters = 2\n",
    )
    .unwrap();
    let expect = |l: usize| {
        param_count(&ModelConfig::Bcaps(BCapsConfig {
            input_dim: 784,
            c: 4,
            d: 16,
            l,
            d1: 64,
            routing_iters: 2,
            use_capsule_batchnorm: true,
            dec_hidden: 512,
            sampling: bcaps::models::SamplingStrategy::DataDriven,
        }))
        .to_string()
    };
    let (code, out, _) = run(["params", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(out.trim(), expect(6));
    let (code, out, _) = run(["params", "--config", cfg.to_str().unwrap(), "--latent", "2"]);
    assert_eq!(code, 0);
    assert_eq!(out.trim(), expect(2), "flag must beat the config file");
}

#[test]
fn bad_config_files_and_missing_paths_are_usage_errors() {
    let unknown = aux_root().join("unknown.kv");
    fs::write(&unknown, "bogus_key = 1\n").unwrap();
    let (code, _, err) = run(["params", "--config", unknown.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("bogus-key"), "{err}");

    let malformed = aux_root().join("malformed.kv");
    fs::write(&malformed, "caps 4\n").unwrap();
    let (code, _, err) = run(["params", "--config", malformed.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("key=value"), "{err}");

    let (code, _, err) = run([
        "train",
        "--model",
        "bcaps",
        "--data",
        "/no/such/dir",
        "--epochs",
        "1",
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("--data"), "{err}");

    let (code, _, err) = run([
        "eval",
        "--checkpoint",
        "/no/such/file.ckpt",
        "--data",
        data_dir().to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("--checkpoint"), "{err}");
}
