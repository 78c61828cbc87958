use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mpanet::attention::{
    axial_position_sensitive_attention, nonlocal_attention, AttentionOptions, Axis, EmbeddingTables,
};
use mpanet::autodiff::kernels::{mac_count, reset_mac_count};
use mpanet::autodiff::nn::Upsample;
use mpanet::autodiff::Tape;
use mpanet::data::pgm::{
    dequantize, load_raster, mask_to_raster, quantize, raster_to_mask, save_raster,
};
use mpanet::data::{
    generate_synthetic, load_dataset, save_dataset, split_dataset, Background, Sample,
    SyntheticSceneConfig,
};
use mpanet::gradsuite::{network_check, op_checks};
use mpanet::metrics::{evaluate, F1Mode, IouMode, MetricsConfig};
use mpanet::network::{MpaNet, MpaNetConfig};
use mpanet::params::ParamStore;
use mpanet::raster::{Image, Mask};
use mpanet::training::{train, AdamConfig, Checkpoint, LossKind, TrainConfig};
use mpanet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::settings::Settings;
use crate::{
    BenchArgs, Cli, Command, EvalArgs, Failure, GradcheckArgs, InferArgs, ModelArgs, SynthArgs,
    TrainArgs,
};

const COMMON: &[&str] = &["out", "seed"];
const MODEL_KEYS: &[&str] = &[
    "height",
    "width",
    "channels",
    "heads",
    "patch_scales",
    "threshold",
    "positional",
    "scale_logits",
    "per_head_embeddings",
    "local_blocks",
    "upsample",
];
const SYNTH_KEYS: &[&str] = &["n", "height", "width", "background"];
const TRAIN_KEYS: &[&str] = &[
    "data",
    "epochs",
    "batch_size",
    "lr",
    "loss",
    "resume",
    "eval_every",
    "hflip",
    "random_crop",
];
const EVAL_KEYS: &[&str] = &[
    "checkpoint",
    "model",
    "data",
    "split",
    "pred_dir",
    "f1_as_printed",
    "iou_as_printed",
];
const INFER_KEYS: &[&str] = &["checkpoint", "model", "image"];
const GRADCHECK_KEYS: &[&str] = &["seeds", "coords"];
const BENCH_KEYS: &[&str] = &["sizes", "channels", "heads", "repeats"];

pub fn run(cli: Cli) -> Result<(), Failure> {
    let own: &[&str] = match &cli.command {
        Command::Synth(_) => SYNTH_KEYS,
        Command::Train(_) => &[TRAIN_KEYS, MODEL_KEYS].concat(),
        Command::Eval(_) => EVAL_KEYS,
        Command::Infer(_) => INFER_KEYS,
        Command::Gradcheck(_) => GRADCHECK_KEYS,
        Command::Bench(_) => BENCH_KEYS,
    };
    let allowed = [COMMON, own].concat();
    let mut s = Settings::load(cli.config.as_deref(), &allowed)?;
    s.set("out", cli.out.as_ref().map(|p| p.display()));
    s.set("seed", cli.seed);
    match &cli.command {
        Command::Synth(a) => synth(s, a),
        Command::Train(a) => train_cmd(s, a),
        Command::Eval(a) => eval(s, a),
        Command::Infer(a) => infer(s, a),
        Command::Gradcheck(a) => gradcheck(s, a),
        Command::Bench(a) => bench(s, a),
    }
}

fn out_dir(s: &Settings) -> Result<PathBuf, Failure> {
    let dir: PathBuf = s.get("out", PathBuf::from("out"))?;
    std::fs::create_dir_all(&dir).map_err(|e| {
        Failure::Usage(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)
        .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn synth(mut s: Settings, a: &SynthArgs) -> Result<(), Failure> {
    s.set("n", a.n);
    s.set("height", a.height);
    s.set("width", a.width);
    s.set("background", a.background.as_ref());
    let n: usize = s.get("n", 200)?;
    if n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let seed = s.get("seed", 0u64)?;
    let background = match s.get("background", "cloud".to_string())?.as_str() {
        "flat" => Background::Flat,
        "gradient" => Background::Gradient,
        "cloud" => Background::CloudNoise,
        other => {
            return Err(Failure::Usage(format!(
                "unknown background `{other}` (flat, gradient or cloud)"
            )))
        }
    };
    let cfg = SyntheticSceneConfig {
        background,
        ..SyntheticSceneConfig::sized(s.get("height", 64)?, s.get("width", 64)?, seed)
    };
    let samples = generate_synthetic(&cfg, n)?;
    let split = split_dataset(samples, (3, 1, 1), seed)?;
    let dir = out_dir(&s)?;
    save_dataset(&dir, &split)?;
    println!(
        "wrote {n} images to {} (train {}, val {}, test {})",
        dir.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn set_model_flags(s: &mut Settings, m: &ModelArgs) {
    s.set("height", m.height);
    s.set("width", m.width);
    s.set("channels", m.channels.as_ref());
    s.set("heads", m.heads);
    s.set("patch_scales", m.patch_scales.as_ref());
    s.set("threshold", m.threshold);
}

fn model_config(s: &Settings, size: (usize, usize)) -> Result<MpaNetConfig, Failure> {
    let d = MpaNetConfig::default();
    let upsample = match s.get("upsample", "nearest".to_string())?.as_str() {
        "nearest" => Upsample::Nearest,
        "bilinear" => Upsample::Bilinear,
        other => {
            return Err(Failure::Usage(format!(
                "unknown upsample `{other}` (nearest or bilinear)"
            )))
        }
    };
    let cfg = MpaNetConfig {
        input_size: (s.get("height", size.0)?, s.get("width", size.1)?),
        channels: s.list("channels", &d.channels)?,
        heads: s.get("heads", d.heads)?,
        patch_scales: s.list("patch_scales", &d.patch_scales)?,
        threshold: s.get("threshold", d.threshold)?,
        positional: s.flag("positional", d.positional)?,
        scale_logits: s.flag("scale_logits", d.scale_logits)?,
        per_head_embeddings: s.flag("per_head_embeddings", d.per_head_embeddings)?,
        local_blocks: s.get("local_blocks", d.local_blocks)?,
        upsample,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn render_model_config(c: &MpaNetConfig) -> String {
    let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let upsample = match c.upsample {
        Upsample::Nearest => "nearest",
        Upsample::Bilinear => "bilinear",
    };
    format!(
        "height = {}\nwidth = {}\nchannels = {}\nheads = {}\npatch_scales = {}\nthreshold = {}\npositional = {}\nscale_logits = {}\nper_head_embeddings = {}\nlocal_blocks = {}\nupsample = {upsample}\n",
        c.input_size.0,
        c.input_size.1,
        list(&c.channels),
        c.heads,
        list(&c.patch_scales),
        c.threshold,
        c.positional,
        c.scale_logits,
        c.per_head_embeddings,
        c.local_blocks,
    )
}

fn existing_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn train_cmd(mut s: Settings, a: &TrainArgs) -> Result<(), Failure> {
    s.set("data", a.data.as_ref().map(|p| p.display()));
    s.set("epochs", a.epochs);
    s.set("batch_size", a.batch_size);
    s.set("lr", a.lr);
    s.set("loss", a.loss.as_ref());
    s.set("resume", a.resume.as_ref().map(|p| p.display()));
    set_model_flags(&mut s, &a.model);

    let data: PathBuf = s.require("data")?;
    existing_dir(&data, "dataset")?;
    let split = load_dataset(&data)?;
    let first = split
        .train
        .first()
        .ok_or_else(|| Failure::Usage(format!("{} has no training images", data.display())))?;
    let config = model_config(&s, first.image.dims())?;
    let seed = s.get("seed", 0u64)?;
    let loss = match s.get("loss", "soft_iou".to_string())?.as_str() {
        "soft_iou" => LossKind::SoftIou,
        "bce" => LossKind::Bce,
        other => {
            return Err(Failure::Usage(format!(
                "unknown loss `{other}` (soft_iou or bce)"
            )))
        }
    };
    let dir = out_dir(&s)?;
    let cfg = TrainConfig {
        loss,
        adam: AdamConfig {
            lr: s.get("lr", 1e-3)?,
            ..Default::default()
        },
        epochs: s.get("epochs", 20)?,
        batch_size: s.get("batch_size", 4)?,
        seed,
        eval_every: s.get("eval_every", 1)?,
        out_dir: Some(dir.clone()),
        random_crop: s.flag("random_crop", false)?,
        hflip: s.flag("hflip", false)?,
        metrics: MetricsConfig::default(),
    };
    let resume = s
        .opt::<PathBuf>("resume")?
        .map(Checkpoint::load)
        .transpose()?;

    let mut store = ParamStore::<f32>::new();
    let model = MpaNet::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    write(&dir.join("model.cfg"), &render_model_config(&model.config))?;
    write(&dir.join("train.cfg"), &s.render())?;
    if let Some(ck) = &resume {
        println!("resuming after epoch {}", ck.epoch);
    }
    let out = train(&model, &mut store, &split, &cfg, resume.as_ref())?;
    for r in &out.log {
        println!(
            "epoch {:>3}  loss {:.4}  val IoU {:.4}  nIoU {:.4}  Pd {:.4}  Fa {:.2}e-6",
            r.epoch + 1,
            r.loss,
            r.val_iou,
            r.val_niou,
            r.val_pd,
            r.val_fa * 1e6
        );
    }
    println!(
        "best val nIoU {:.4} after epoch {}; checkpoints in {}",
        out.best.best_val_niou,
        out.best.epoch,
        dir.display()
    );
    Ok(())
}

/// Rebuilds the network saved by `train` and loads checkpoint parameters into it.
fn load_model(
    checkpoint: &Path,
    model_cfg: Option<PathBuf>,
) -> Result<(MpaNet, ParamStore<f32>), Failure> {
    let cfg_path = model_cfg.unwrap_or_else(|| checkpoint.with_file_name("model.cfg"));
    let s = Settings::load(Some(&cfg_path), MODEL_KEYS)?;
    let config = model_config(&s, MpaNetConfig::default().input_size)
        .map_err(|f| f.context(&cfg_path.display().to_string()))?;
    let ck = Checkpoint::load(checkpoint)?;
    let mut store = ParamStore::new();
    let model = MpaNet::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.restore(&mut store, None)?;
    Ok((model, store))
}

fn predict(
    model: &MpaNet,
    store: &ParamStore<f32>,
    image: &Image,
) -> Result<(Image, Mask), Failure> {
    let heat = model.predict_image(store, image)?;
    let t = model.config.threshold;
    let mask = heat.map(|v| v as f64 > t);
    Ok((heat, mask))
}

fn eval(mut s: Settings, a: &EvalArgs) -> Result<(), Failure> {
    s.set("checkpoint", a.checkpoint.as_ref().map(|p| p.display()));
    s.set("model", a.model.as_ref().map(|p| p.display()));
    s.set("data", a.data.as_ref().map(|p| p.display()));
    s.set("split", a.split.as_ref());
    s.set("pred_dir", a.pred_dir.as_ref().map(|p| p.display()));
    s.set("f1_as_printed", a.f1_as_printed.then_some(true));
    s.set("iou_as_printed", a.iou_as_printed.then_some(true));

    let data: PathBuf = s.require("data")?;
    existing_dir(&data, "dataset")?;
    let split = load_dataset(&data)?;
    let which = s.get("split", "test".to_string())?;
    let samples: Vec<&Sample> = match which.as_str() {
        "train" => split.train.iter().collect(),
        "val" => split.val.iter().collect(),
        "test" => split.test.iter().collect(),
        "all" => split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .collect(),
        other => {
            return Err(Failure::Usage(format!(
                "unknown split `{other}` (train, val, test or all)"
            )))
        }
    };
    if samples.is_empty() {
        return Err(Failure::Usage(format!(
            "split `{which}` of {} is empty",
            data.display()
        )));
    }
    let metrics = MetricsConfig {
        iou_mode: if s.flag("iou_as_printed", false)? {
            IouMode::AsPrinted
        } else {
            IouMode::Union
        },
        f1_mode: if s.flag("f1_as_printed", false)? {
            F1Mode::AsPrinted
        } else {
            F1Mode::Harmonic
        },
        ..Default::default()
    };

    let mut items = Vec::with_capacity(samples.len());
    match (
        s.opt::<PathBuf>("pred_dir")?,
        s.opt::<PathBuf>("checkpoint")?,
    ) {
        (Some(pred_dir), None) => {
            existing_dir(&pred_dir, "prediction directory")?;
            for sample in &samples {
                let pred =
                    raster_to_mask(&load_raster(pred_dir.join(format!("{}.pgm", sample.id)))?);
                items.push((sample.id.clone(), pred, sample.mask.clone()));
            }
        }
        (None, Some(ck)) => {
            let (model, store) = load_model(&ck, s.opt("model")?)?;
            for sample in &samples {
                let (_, pred) = predict(&model, &store, &sample.image)?;
                items.push((sample.id.clone(), pred, sample.mask.clone()));
            }
        }
        _ => {
            return Err(Failure::Usage(
                "give exactly one of --checkpoint and --pred-dir".into(),
            ))
        }
    }
    let report = evaluate(&items, &metrics)?;
    let dir = out_dir(&s)?;
    report.write_csv(dir.join("per_image.csv"), dir.join("summary.csv"))?;
    println!("{} images from the {which} split", items.len());
    println!(
        "IoU {:.4}  nIoU {:.4}  Pd {:.4}  Fa {:.4e} ({:.2} x 1e-6)",
        report.iou,
        report.niou,
        report.pd,
        report.fa,
        report.fa_e6()
    );
    let mode = if metrics.f1_mode == F1Mode::AsPrinted {
        "as printed"
    } else {
        "harmonic"
    };
    println!(
        "F1 {:.4} ({mode}); harmonic {:.4}, as printed {:.4}",
        report.f1, report.f1_harmonic, report.f1_as_printed
    );
    Ok(())
}

fn infer(mut s: Settings, a: &InferArgs) -> Result<(), Failure> {
    s.set("checkpoint", a.checkpoint.as_ref().map(|p| p.display()));
    s.set("model", a.model.as_ref().map(|p| p.display()));
    s.set("image", a.image.as_ref().map(|p| p.display()));
    let ck: PathBuf = s.require("checkpoint")?;
    let image_path: PathBuf = s.require("image")?;
    let (model, store) = load_model(&ck, s.opt("model")?)?;
    let image = dequantize(&load_raster(&image_path)?);
    let (heat, mask) = predict(&model, &store, &image)?;
    let dir = out_dir(&s)?;
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    let (heat_path, mask_path) = (
        dir.join(format!("{stem}.heatmap.pgm")),
        dir.join(format!("{stem}.mask.pgm")),
    );
    save_raster(&quantize(&heat), &heat_path)?;
    save_raster(&mask_to_raster(&mask), &mask_path)?;
    println!(
        "{} and {} ({} pixels above {})",
        heat_path.display(),
        mask_path.display(),
        mask.count(),
        model.config.threshold
    );
    Ok(())
}

fn gradcheck(mut s: Settings, a: &GradcheckArgs) -> Result<(), Failure> {
    s.set("seeds", a.seeds);
    s.set("coords", a.coords);
    let seeds: u64 = s.get("seeds", 3)?;
    let coords: usize = s.get("coords", 20)?;
    let base = s.get("seed", 0u64)?;
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let mut csv = String::from("name,seeds,max_rel_err,tol,checked,refined,status\n");
    let mut failed = Vec::new();
    let mut record = |name: &str, reports: Vec<mpanet::autodiff::gradcheck::GradCheckReport>| {
        let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        let passed = reports.iter().all(|r| r.passed());
        let (checked, refined) = reports
            .iter()
            .fold((0, 0), |(c, f), r| (c + r.checked, f + r.refined));
        let status = if passed { "PASS" } else { "FAIL" };
        println!(
            "{name:<40} max rel err {worst:.2e}  tol {:.0e}  {status}",
            reports[0].tol
        );
        let _ = writeln!(
            csv,
            "{name},{},{worst:e},{},{checked},{refined},{status}",
            reports.len(),
            reports[0].tol
        );
        if !passed {
            failed.push(name.to_string());
        }
    };
    for check in op_checks() {
        let reports = (base..base + seeds)
            .map(|seed| check.run(seed))
            .collect::<Result<Vec<_>, _>>()?;
        record(check.name, reports);
    }
    if coords > 0 {
        let reports = (base..base + seeds)
            .map(|seed| network_check(seed, Some(coords)))
            .collect::<Result<Vec<_>, _>>()?;
        record("network", reports);
    }
    let dir = out_dir(&s)?;
    write(&dir.join("gradcheck.csv"), &csv)?;
    if failed.is_empty() {
        println!("all checks pass");
        Ok(())
    } else {
        Err(Failure::Internal(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

struct Cost {
    macs: u64,
    seconds: f64,
}

#[derive(Clone, Copy, PartialEq)]
enum Variant {
    NonLocal,
    Axial,
    AxialPositional,
}

/// Best-of-`repeats` wall time and multiply-accumulate count of one attention forward pass.
/// The axial variants run a height pass followed by a width pass.
fn attention_cost(
    size: usize,
    channels: usize,
    heads: usize,
    variant: Variant,
    repeats: usize,
    seed: u64,
) -> Result<Cost, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = vec![1, channels, size, size];
    let tensors: Vec<Tensor<f32>> = (0..3)
        .map(|_| Tensor::uniform(shape.clone(), -1.0, 1.0, &mut rng))
        .collect();
    let opts = AttentionOptions {
        heads,
        scale_logits: true,
    };
    let span = 2 * size - 1;
    let d = channels / heads;
    let (mut best, mut macs) = (f64::INFINITY, 0);
    for _ in 0..repeats.max(1) {
        let tape = Tape::new();
        let [q, k, v] = [0, 1, 2].map(|i| tape.constant(tensors[i].clone()));
        let tables = || {
            (variant == Variant::AxialPositional).then(|| EmbeddingTables {
                q: tape.constant(Tensor::zeros([d, span])),
                k: tape.constant(Tensor::zeros([d, span])),
                v: tape.constant(Tensor::zeros([d, span])),
            })
        };
        reset_mac_count();
        let start = Instant::now();
        if variant == Variant::NonLocal {
            nonlocal_attention(q, k, v, opts)?;
        } else {
            let y = axial_position_sensitive_attention(q, k, v, tables(), Axis::Height, opts)?;
            axial_position_sensitive_attention(q, k, y, tables(), Axis::Width, opts)?;
        }
        best = best.min(start.elapsed().as_secs_f64());
        macs = mac_count();
    }
    Ok(Cost {
        macs,
        seconds: best,
    })
}

fn bench(mut s: Settings, a: &BenchArgs) -> Result<(), Failure> {
    s.set("sizes", a.sizes.as_ref());
    s.set("channels", a.channels);
    s.set("heads", a.heads);
    s.set("repeats", a.repeats);
    let sizes: Vec<usize> = s.list("sizes", &[8, 16, 32, 64])?;
    let channels: usize = s.get("channels", 8)?;
    let heads: usize = s.get("heads", 1)?;
    let repeats: usize = s.get("repeats", 3)?;
    let seed = s.get("seed", 0u64)?;
    if heads == 0 || !channels.is_multiple_of(heads) || sizes.contains(&0) {
        return Err(Failure::Usage(format!(
            "need positive sizes and channels ({channels}) divisible by heads ({heads})"
        )));
    }
    let mut csv = String::from(
        "size,nonlocal_macs,axial_macs,axial_position_macs,mac_ratio,position_mac_ratio,analytic_ratio,nonlocal_ms,axial_ms,time_ratio\n",
    );
    for &n in &sizes {
        let full = attention_cost(n, channels, heads, Variant::NonLocal, repeats, seed)?;
        let axial = attention_cost(n, channels, heads, Variant::Axial, repeats, seed)?;
        let positional =
            attention_cost(n, channels, heads, Variant::AxialPositional, repeats, seed)?;
        let analytic = (2 * n) as f64 / (n * n) as f64;
        let _ = writeln!(
            csv,
            "{n},{},{},{},{},{},{analytic},{:.3},{:.3},{}",
            full.macs,
            axial.macs,
            positional.macs,
            axial.macs as f64 / full.macs as f64,
            positional.macs as f64 / full.macs as f64,
            full.seconds * 1e3,
            axial.seconds * 1e3,
            axial.seconds / full.seconds
        );
    }
    print!("{csv}");
    let dir = out_dir(&s)?;
    write(&dir.join("bench.csv"), &csv)?;
    Ok(())
}
