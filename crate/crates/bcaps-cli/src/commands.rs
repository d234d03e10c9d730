//! The six subcommands. Each resolves flags against an optional key=value
//! config file, dispatches on numeric precision, and leaves all numerics to
//! the library.

use std::path::{Path, PathBuf};

use clap::Args;

use bcaps::checkpoint::{load_checkpoint, peek_meta, save_checkpoint};
use bcaps::classifier::{accuracy, classify, train_classifier, ClassifierConfig, ClassifierKind};
use bcaps::dataio::{fmt_f64, load_dataset, write_csv, write_image_grid, Split};
use bcaps::error::Error;
use bcaps::gradcheck::gradient_suite;
use bcaps::metrics::{evaluate_reconstructions, Confusion};
use bcaps::models::{param_count, BCapsConfig, BaselineVaeConfig, ModelConfig, SamplingStrategy};
use bcaps::train::{init_state, run_eval, save_history, train_epochs, Precision, TrainConfig};
use bcaps::{Scalar, Tensor};

use crate::config::{
    load_kv, pick, pick_opt, require_dir, require_file, resolve_out, usage, CResult, Kv,
};

const GRID_COLS: usize = 4;
const GRID_IMAGES: usize = 16;

/// Architecture flags shared by `train` and `params`. Unused family's flags
/// are accepted and ignored so one config file can describe either model.
#[derive(Args, Debug)]
pub struct ModelFlags {
    /// Model family: bcaps or vae
    #[arg(long, value_name = "FAMILY")]
    model: Option<String>,
    /// Primary capsule count C (bcaps)
    #[arg(long, value_name = "C")]
    caps: Option<usize>,
    /// Primary capsule dimension D (bcaps)
    #[arg(long, value_name = "D")]
    desc: Option<usize>,
    /// Latent dimension L
    #[arg(long, value_name = "L")]
    latent: Option<usize>,
    /// Output capsule dimension D1 (bcaps)
    #[arg(long, value_name = "D1")]
    d1: Option<usize>,
    /// Dynamic routing iterations (bcaps)
    #[arg(long, value_name = "N")]
    routing_iters: Option<usize>,
    /// Encoder hidden width (vae)
    #[arg(long, value_name = "H")]
    hidden: Option<usize>,
    /// Decoder hidden width
    #[arg(long, value_name = "H")]
    dec_hidden: Option<usize>,
    /// Flattened image length
    #[arg(long, value_name = "PIXELS")]
    input_dim: Option<usize>,
    /// Batch-normalize primary capsules (bcaps)
    #[arg(long, value_name = "BOOL")]
    capsule_bn: Option<bool>,
    /// standard-normal, shifted-normal, or data-driven
    #[arg(long, value_name = "STRATEGY")]
    sampling: Option<SamplingStrategy>,
}

fn build_model_config(f: ModelFlags, kv: &mut Kv) -> CResult<ModelConfig> {
    let family = pick(f.model, kv, "model", "bcaps".into())?;
    let caps = pick(f.caps, kv, "caps", 8)?;
    let desc = pick(f.desc, kv, "desc", 64)?;
    let latent = pick(f.latent, kv, "latent", 2)?;
    let d1 = pick(f.d1, kv, "d1", 64)?;
    let routing_iters = pick(f.routing_iters, kv, "routing-iters", 3)?;
    let hidden = pick(f.hidden, kv, "hidden", 512)?;
    let dec_hidden = pick(f.dec_hidden, kv, "dec-hidden", 512)?;
    let input_dim = pick(f.input_dim, kv, "input-dim", 784)?;
    let capsule_bn = pick(f.capsule_bn, kv, "capsule-bn", true)?;
    let sampling = pick_opt(f.sampling, kv, "sampling")?;

    let cfg = match family.as_str() {
        "bcaps" => ModelConfig::Bcaps(BCapsConfig {
            input_dim,
            c: caps,
            d: desc,
            l: latent,
            d1,
            routing_iters,
            use_capsule_batchnorm: capsule_bn,
            dec_hidden,
            sampling: sampling.unwrap_or(SamplingStrategy::DataDriven),
        }),
        "vae" => ModelConfig::Vae(BaselineVaeConfig {
            input_dim,
            hidden,
            l: latent,
            dec_hidden,
            sampling: sampling.unwrap_or(SamplingStrategy::StandardNormal),
        }),
        other => {
            return Err(usage(format!(
                "unknown model '{other}' (expected bcaps or vae)"
            )))
        }
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn make_out_dir(out: &Path) -> CResult<()> {
    std::fs::create_dir_all(out).map_err(|e| usage(format!("--out {}: {e}", out.display())))
}

/// First `GRID_IMAGES` rows as a batch tensor, or None when empty.
fn grid_head<S: Scalar>(images: &Tensor<S>) -> Option<Tensor<S>> {
    let n = GRID_IMAGES.min(images.shape()[0]);
    if n == 0 {
        return None;
    }
    let dim = images.shape()[1];
    Some(
        Tensor::new(&[n, dim], images.data()[..n * dim].to_vec())
            .expect("head shape"),
    )
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Directory with the four IDX files
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Train on only the first N images
    #[arg(long, value_name = "N")]
    subset: Option<usize>,
    #[arg(long, value_name = "E")]
    epochs: Option<usize>,
    #[arg(long, value_name = "B")]
    batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long, value_name = "LR")]
    lr: Option<f64>,
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Weight on the KL term
    #[arg(long, value_name = "W")]
    kl_weight: Option<f64>,
    /// Ramp the KL weight in over this many leading epochs
    #[arg(long, value_name = "E")]
    kl_warmup: Option<usize>,
    /// f32 or f64
    #[arg(long, value_name = "P")]
    precision: Option<Precision>,
    /// Output directory (default $BCAPS_OUT_DIR, then ./runs)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated epochs at which to write reconstruction grids
    /// (default: the final epoch)
    #[arg(long, value_name = "E,E,..")]
    milestones: Option<String>,
    /// key=value file supplying defaults for any flag
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

pub fn cmd_train(a: TrainArgs) -> CResult<()> {
    let mut kv = load_kv(a.config.as_deref())?;
    let mcfg = build_model_config(a.model, &mut kv)?;
    let tcfg = TrainConfig {
        batch_size: pick(a.batch_size, &mut kv, "batch-size", 128)?,
        epochs: pick(a.epochs, &mut kv, "epochs", 100)?,
        learning_rate: pick(a.lr, &mut kv, "lr", 1e-3)?,
        seed: pick(a.seed, &mut kv, "seed", 0)?,
        kl_weight: pick(a.kl_weight, &mut kv, "kl-weight", 1.0)?,
        kl_warmup_epochs: pick(a.kl_warmup, &mut kv, "kl-warmup", 0)?,
        precision: pick(a.precision, &mut kv, "precision", Precision::F32)?,
    };
    tcfg.validate().map_err(|e| usage(e.to_string()))?;
    let data_dir: PathBuf =
        pick_opt(a.data, &mut kv, "data")?.ok_or_else(|| usage("missing --data <dir>"))?;
    require_dir(&data_dir, "--data")?;
    let subset = pick_opt(a.subset, &mut kv, "subset")?;
    let out = resolve_out(a.out, &mut kv)?;
    let milestones = pick_opt(a.milestones, &mut kv, "milestones")?;
    kv.finish()?;

    let milestones = parse_milestones(milestones.as_deref(), tcfg.epochs)?;
    make_out_dir(&out)?;
    match tcfg.precision {
        Precision::F32 => train_run::<f32>(&mcfg, &tcfg, &data_dir, subset, &out, &milestones),
        Precision::F64 => train_run::<f64>(&mcfg, &tcfg, &data_dir, subset, &out, &milestones),
    }
}

fn parse_milestones(text: Option<&str>, epochs: usize) -> CResult<Vec<u64>> {
    match text {
        None => Ok(vec![epochs as u64]),
        Some(t) => t
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<u64>()
                    .map_err(|e| usage(format!("invalid value for milestones: '{p}': {e}")))
            })
            .collect(),
    }
}

fn train_run<S: Scalar>(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    data_dir: &Path,
    subset: Option<usize>,
    out: &Path,
    milestones: &[u64],
) -> CResult<()> {
    let mut train_ds = load_dataset::<S>(data_dir, Split::Train)?;
    if let Some(n) = subset {
        train_ds = train_ds.subset(n);
    }
    let test_ds = load_dataset::<S>(data_dir, Split::Test)?;
    let grid_x = grid_head(&test_ds.images);
    if let Some(x) = &grid_x {
        write_image_grid(x, GRID_COLS, &out.join("original_grid.pgm"))?;
    }

    let mut state = init_state::<S>(mcfg, tcfg)?;
    let history = train_epochs(&mut state, &train_ds, tcfg, tcfg.epochs, &mut |st, stats| {
        eprintln!(
            "epoch {:>4}/{} recon {:.6} kl {:.6} total {:.6}",
            stats.epoch, tcfg.epochs, stats.recon, stats.kl, stats.total
        );
        if let Some(x) = &grid_x {
            if milestones.contains(&stats.epoch) {
                let (xhat, _) = run_eval(&st.model, x, tcfg.seed, GRID_IMAGES)?;
                let name = format!("recon_epoch_{}.pgm", stats.epoch);
                write_image_grid(&xhat, GRID_COLS, &out.join(name))?;
            }
        }
        Ok(())
    })?;
    save_checkpoint(&state, tcfg, &out.join("checkpoint.ckpt"))?;
    save_history(&out.join("history.csv"), &history)?;
    println!(
        "trained {} epochs on {} images; outputs in {}",
        tcfg.epochs,
        train_ds.len(),
        out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Trained model checkpoint
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Directory with the four IDX files
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Evaluate only the first N test images
    #[arg(long, value_name = "N")]
    test_subset: Option<usize>,
    /// Noise seed (default: the checkpoint's training seed)
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    #[arg(long, value_name = "B")]
    batch_size: Option<usize>,
    /// Output directory (default $BCAPS_OUT_DIR, then ./runs)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// key=value file supplying defaults for any flag
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

pub fn cmd_eval(a: EvalArgs) -> CResult<()> {
    let mut kv = load_kv(a.config.as_deref())?;
    let ckpt: PathBuf = pick_opt(a.checkpoint, &mut kv, "checkpoint")?
        .ok_or_else(|| usage("missing --checkpoint <file>"))?;
    require_file(&ckpt, "--checkpoint")?;
    let data_dir: PathBuf =
        pick_opt(a.data, &mut kv, "data")?.ok_or_else(|| usage("missing --data <dir>"))?;
    require_dir(&data_dir, "--data")?;
    let test_subset = pick_opt(a.test_subset, &mut kv, "test-subset")?;
    let seed = pick_opt(a.seed, &mut kv, "seed")?;
    let batch_size = pick(a.batch_size, &mut kv, "batch-size", 256)?;
    let out = resolve_out(a.out, &mut kv)?;
    kv.finish()?;
    make_out_dir(&out)?;

    let meta = peek_meta(&ckpt)?;
    match meta.train.precision {
        Precision::F32 => eval_run::<f32>(&ckpt, &data_dir, test_subset, seed, batch_size, &out),
        Precision::F64 => eval_run::<f64>(&ckpt, &data_dir, test_subset, seed, batch_size, &out),
    }
}

fn eval_run<S: Scalar>(
    ckpt: &Path,
    data_dir: &Path,
    test_subset: Option<usize>,
    seed: Option<u64>,
    batch_size: usize,
    out: &Path,
) -> CResult<()> {
    let (state, tcfg) = load_checkpoint::<S>(ckpt)?;
    let mut test = load_dataset::<S>(data_dir, Split::Test)?;
    if let Some(n) = test_subset {
        test = test.subset(n);
    }
    let seed = seed.unwrap_or(tcfg.seed);
    let (xhat, _) = run_eval(&state.model, &test.images, seed, batch_size)?;
    let report = evaluate_reconstructions(&test.images, &xhat)?;

    let n = test.len();
    let mut rows = Vec::with_capacity(n + 2);
    for i in 0..n {
        rows.push(vec![
            i.to_string(),
            fmt_f64(report.mse[i]),
            fmt_f64(report.ssim[i]),
        ]);
    }
    rows.push(vec![
        "mean".into(),
        fmt_f64(report.mse_mean),
        fmt_f64(report.ssim_mean),
    ]);
    rows.push(vec![
        "std".into(),
        fmt_f64(report.mse_std),
        fmt_f64(report.ssim_std),
    ]);
    write_csv(&out.join("metrics.csv"), &["image", "mse", "ssim"], &rows)?;

    if let Some(x) = grid_head(&test.images) {
        write_image_grid(&x, GRID_COLS, &out.join("original_grid.pgm"))?;
        let recon = grid_head(&xhat).expect("nonempty with originals");
        write_image_grid(&recon, GRID_COLS, &out.join("recon_grid.pgm"))?;
    }
    println!("n {n}");
    println!("mse  {:.6} ± {:.6}", report.mse_mean, report.mse_std);
    println!("ssim {:.6} ± {:.6}", report.ssim_mean, report.ssim_std);
    Ok(())
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    /// Trained model checkpoint
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Directory with the four IDX files
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Train the classifier on only the first N training images
    #[arg(long, value_name = "N")]
    subset: Option<usize>,
    /// Classify only the first N test images
    #[arg(long, value_name = "N")]
    test_subset: Option<usize>,
    /// softmax-linear or rbf-svm-subset
    #[arg(long, value_name = "KIND")]
    classifier: Option<ClassifierKind>,
    #[arg(long, value_name = "E")]
    clf_epochs: Option<usize>,
    #[arg(long, value_name = "B")]
    clf_batch_size: Option<usize>,
    #[arg(long, value_name = "LR")]
    clf_lr: Option<f64>,
    /// Cap on SVM training points
    #[arg(long, value_name = "N")]
    svm_subset: Option<usize>,
    #[arg(long, value_name = "C")]
    svm_c: Option<f64>,
    #[arg(long, value_name = "G")]
    svm_gamma: Option<f64>,
    /// Classifier and noise seed (default: the checkpoint's training seed)
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Output directory (default $BCAPS_OUT_DIR, then ./runs)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Score original test images as their own reconstruction
    #[arg(long, hide = true)]
    identity_stub: bool,
    /// key=value file supplying defaults for any flag
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

pub fn cmd_classify(a: ClassifyArgs) -> CResult<()> {
    let mut kv = load_kv(a.config.as_deref())?;
    let ckpt: PathBuf = pick_opt(a.checkpoint, &mut kv, "checkpoint")?
        .ok_or_else(|| usage("missing --checkpoint <file>"))?;
    require_file(&ckpt, "--checkpoint")?;
    let data_dir: PathBuf =
        pick_opt(a.data, &mut kv, "data")?.ok_or_else(|| usage("missing --data <dir>"))?;
    require_dir(&data_dir, "--data")?;
    let subset = pick_opt(a.subset, &mut kv, "subset")?;
    let test_subset = pick_opt(a.test_subset, &mut kv, "test-subset")?;
    let base = ClassifierConfig::default();
    let ccfg = ClassifierConfig {
        kind: pick(a.classifier, &mut kv, "classifier", base.kind)?,
        epochs: pick(a.clf_epochs, &mut kv, "clf-epochs", base.epochs)?,
        batch_size: pick(a.clf_batch_size, &mut kv, "clf-batch-size", base.batch_size)?,
        learning_rate: pick(a.clf_lr, &mut kv, "clf-lr", base.learning_rate)?,
        seed: base.seed,
        svm_subset: pick(a.svm_subset, &mut kv, "svm-subset", base.svm_subset)?,
        svm_c: pick(a.svm_c, &mut kv, "svm-c", base.svm_c)?,
        svm_gamma: pick(a.svm_gamma, &mut kv, "svm-gamma", base.svm_gamma)?,
    };
    let seed = pick_opt(a.seed, &mut kv, "seed")?;
    let out = resolve_out(a.out, &mut kv)?;
    kv.finish()?;
    make_out_dir(&out)?;

    let meta = peek_meta(&ckpt)?;
    match meta.train.precision {
        Precision::F32 => classify_run::<f32>(
            &ckpt,
            &data_dir,
            subset,
            test_subset,
            ccfg,
            seed,
            a.identity_stub,
            &out,
        ),
        Precision::F64 => classify_run::<f64>(
            &ckpt,
            &data_dir,
            subset,
            test_subset,
            ccfg,
            seed,
            a.identity_stub,
            &out,
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn classify_run<S: Scalar>(
    ckpt: &Path,
    data_dir: &Path,
    subset: Option<usize>,
    test_subset: Option<usize>,
    mut ccfg: ClassifierConfig,
    seed: Option<u64>,
    identity_stub: bool,
    out: &Path,
) -> CResult<()> {
    let (state, tcfg) = load_checkpoint::<S>(ckpt)?;
    let mut train_ds = load_dataset::<S>(data_dir, Split::Train)?;
    if let Some(n) = subset {
        train_ds = train_ds.subset(n);
    }
    let mut test_ds = load_dataset::<S>(data_dir, Split::Test)?;
    if let Some(n) = test_subset {
        test_ds = test_ds.subset(n);
    }
    let seed = seed.unwrap_or(tcfg.seed);
    ccfg.seed = seed;

    let num_classes = train_ds
        .labels
        .iter()
        .chain(test_ds.labels.iter())
        .copied()
        .max()
        .map_or(0, |m| m as usize + 1);

    let clf = train_classifier(&train_ds.images, &train_ds.labels, num_classes, &ccfg)?;
    let xhat = if identity_stub {
        test_ds.images.clone()
    } else {
        run_eval(&state.model, &test_ds.images, seed, 256)?.0
    };
    let pred = classify(&clf, &xhat)?;
    let conf = Confusion::from_labels(&test_ds.labels, &pred, num_classes)?;

    let f1 = conf.f1_per_class();
    let mut rows: Vec<Vec<String>> = f1
        .iter()
        .enumerate()
        .map(|(c, v)| vec![c.to_string(), fmt_f64(*v)])
        .collect();
    rows.push(vec!["macro".into(), fmt_f64(conf.f1_macro())]);
    write_csv(&out.join("f1.csv"), &["class", "f1"], &rows)?;

    let header_owned: Vec<String> = std::iter::once("truth".to_string())
        .chain((0..num_classes).map(|c| format!("pred_{c}")))
        .collect();
    let header: Vec<&str> = header_owned.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> = (0..num_classes)
        .map(|t| {
            std::iter::once(t.to_string())
                .chain((0..num_classes).map(|p| conf.count(t, p).to_string()))
                .collect()
        })
        .collect();
    write_csv(&out.join("confusion.csv"), &header, &rows)?;

    println!("n {}", test_ds.len());
    println!("macro f1 {:.6}", conf.f1_macro());
    println!("accuracy {:.6}", accuracy(&test_ds.labels, &pred));
    Ok(())
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Trained model checkpoint
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Directory with the four IDX files
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Export only the first N test images
    #[arg(long, value_name = "N")]
    test_subset: Option<usize>,
    /// Noise seed (default: the checkpoint's training seed)
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    #[arg(long, value_name = "B")]
    batch_size: Option<usize>,
    /// Output directory (default $BCAPS_OUT_DIR, then ./runs)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// key=value file supplying defaults for any flag
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

pub fn cmd_export_latent(a: ExportArgs) -> CResult<()> {
    let mut kv = load_kv(a.config.as_deref())?;
    let ckpt: PathBuf = pick_opt(a.checkpoint, &mut kv, "checkpoint")?
        .ok_or_else(|| usage("missing --checkpoint <file>"))?;
    require_file(&ckpt, "--checkpoint")?;
    let data_dir: PathBuf =
        pick_opt(a.data, &mut kv, "data")?.ok_or_else(|| usage("missing --data <dir>"))?;
    require_dir(&data_dir, "--data")?;
    let test_subset = pick_opt(a.test_subset, &mut kv, "test-subset")?;
    let seed = pick_opt(a.seed, &mut kv, "seed")?;
    let batch_size = pick(a.batch_size, &mut kv, "batch-size", 256)?;
    let out = resolve_out(a.out, &mut kv)?;
    kv.finish()?;
    make_out_dir(&out)?;

    let meta = peek_meta(&ckpt)?;
    match meta.train.precision {
        Precision::F32 => export_run::<f32>(&ckpt, &data_dir, test_subset, seed, batch_size, &out),
        Precision::F64 => export_run::<f64>(&ckpt, &data_dir, test_subset, seed, batch_size, &out),
    }
}

fn export_run<S: Scalar>(
    ckpt: &Path,
    data_dir: &Path,
    test_subset: Option<usize>,
    seed: Option<u64>,
    batch_size: usize,
    out: &Path,
) -> CResult<()> {
    let (state, tcfg) = load_checkpoint::<S>(ckpt)?;
    let mut test = load_dataset::<S>(data_dir, Split::Test)?;
    if let Some(n) = test_subset {
        test = test.subset(n);
    }
    let seed = seed.unwrap_or(tcfg.seed);
    let (_, z) = run_eval(&state.model, &test.images, seed, batch_size)?;
    let latent = state.model.latent_dim();
    if latent != 2 {
        eprintln!("warning: latent dimension is {latent}; exporting the first two coordinates");
    }

    let zd = z.data();
    let rows: Vec<Vec<String>> = (0..test.len())
        .map(|i| {
            let z1 = zd[i * latent].to_f64();
            let z2 = if latent >= 2 {
                zd[i * latent + 1].to_f64()
            } else {
                0.0
            };
            vec![fmt_f64(z1), fmt_f64(z2), test.labels[i].to_string()]
        })
        .collect();
    let path = out.join("latent.csv");
    write_csv(&path, &["z1", "z2", "label"], &rows)?;
    println!("wrote {} rows to {}", test.len(), path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// key=value file supplying defaults for any flag
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

pub fn cmd_params(a: ParamsArgs) -> CResult<()> {
    let mut kv = load_kv(a.config.as_deref())?;
    let mcfg = build_model_config(a.model, &mut kv)?;
    kv.finish()?;
    println!("{}", param_count(&mcfg));
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Corrupt one entry to exercise the failure path
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

pub fn cmd_gradcheck(a: GradcheckArgs) -> CResult<()> {
    let entries = gradient_suite(a.corrupt_gradient)?;
    let failed = entries.iter().filter(|e| !e.passed()).count();
    for e in &entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<34} {:>12.3e}  tol {:.0e}  {status}",
            e.name, e.err, e.tol
        );
    }
    if failed > 0 {
        return Err(Error::Contract(format!("{failed} gradient checks over tolerance")).into());
    }
    println!("all {} checks passed", entries.len());
    Ok(())
}
