//! Acceptance suite. Runs without the test harness so each criterion prints one line.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::attention::{
    axial_oracle, max_diff, nonlocal_along_axis, nonlocal_oracle, rand_t, random_tables, run_axial,
    run_nonlocal, Tables,
};
use common::{brute_metrics, random_mask};
use mpanet::attention::{
    axial_position_sensitive_attention, nonlocal_attention, AttentionOptions, Axis, EmbeddingTables,
};
use mpanet::autodiff::kernels::{mac_count, reset_mac_count};
use mpanet::autodiff::Tape;
use mpanet::data::pgm::{dequantize, load_raster, quantize, save_raster};
use mpanet::data::{generate_synthetic, split_dataset, SyntheticSceneConfig};
use mpanet::gradsuite::{network_check, op_checks};
use mpanet::metrics::{evaluate, extract_targets, match_targets, MetricsConfig, Target};
use mpanet::network::{merge_tensor, split_tensor, MpaNet, MpaNetConfig};
use mpanet::params::ParamStore;
use mpanet::raster::{Image, Mask};
use mpanet::training::{evaluate_model, train, AdamConfig, Checkpoint, TrainConfig};
use mpanet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradients() -> Outcome {
    const SEEDS: u64 = 20;
    let start = Instant::now();
    let checks = op_checks();
    let mut worst_op = 0.0f64;
    for seed in 0..SEEDS {
        for c in &checks {
            let r = c
                .run(seed)
                .map_err(|e| format!("{} seed {seed}: {e}", c.name))?;
            check(r.passed() && r.tol <= 1e-3, || {
                format!("{} seed {seed}: rel err {:.2e}", c.name, r.max_rel_err)
            })?;
            if c.tol <= 1e-4 {
                worst_op = worst_op.max(r.max_rel_err);
            }
        }
    }
    // every coordinate on the first seed, a sample of each tensor on the rest
    let (mut worst_net, mut probes, mut refined) = (0.0f64, 0, 0);
    for seed in 0..SEEDS {
        let r = network_check(seed, if seed == 0 { None } else { Some(20) })
            .map_err(|e| format!("network seed {seed}: {e}"))?;
        check(r.passed() && r.tol <= 1e-3, || {
            format!(
                "network seed {seed}: rel err {:.2e} at {:?}",
                r.max_rel_err, r.worst
            )
        })?;
        worst_net = worst_net.max(r.max_rel_err);
        probes += r.checked;
        refined += r.refined;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(300), || {
        format!("took {elapsed:.1?}")
    })?;
    Ok(format!(
        "{} ops x {SEEDS} seeds max rel err {worst_op:.1e} (op tol 1e-4); network x {SEEDS} seeds, {probes} probes ({refined} refined at kinks), max rel err {worst_net:.1e}; {elapsed:.1?}",
        checks.len()
    ))
}

fn attention_oracles() -> Outcome {
    let mut cases = 0;
    let mut worst = 0.0f64;
    for n in 1..=2 {
        for c in 1..=3 {
            for h in 1..=4 {
                for w in 1..=4 {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64((((n * 4 + c) * 5 + h) * 5 + w) as u64 + 1000);
                    let heads = if c == 2 && rng.random_bool(0.5) { 2 } else { 1 };
                    let scaled = rng.random_bool(0.5);
                    let opts = AttentionOptions {
                        heads,
                        scale_logits: scaled,
                    };
                    let shape = [n, c, h, w];
                    let (q, k, v) = (
                        rand_t(&shape, &mut rng),
                        rand_t(&shape, &mut rng),
                        rand_t(&shape, &mut rng),
                    );
                    worst = worst.max(max_diff(
                        &run_nonlocal(&q, &k, &v, opts),
                        &nonlocal_oracle(&q, &k, &v, heads, scaled),
                    ));
                    for axis in [Axis::Height, Axis::Width] {
                        let len = if axis == Axis::Width { w } else { h };
                        let tables =
                            random_tables(heads, c / heads, c / heads, len, heads > 1, &mut rng);
                        for t in [Some(&tables), None] {
                            let got =
                                run_axial(&q, &k, &v, t, axis, opts).map_err(|e| e.to_string())?;
                            worst = worst.max(max_diff(
                                &got,
                                &axial_oracle(&q, &k, &v, t, axis, heads, scaled),
                            ));
                        }
                    }
                    cases += 1;
                }
            }
        }
    }
    check(worst < 1e-6, || format!("oracle mismatch {worst:.2e}"))?;
    check(cases >= 50, || format!("only {cases} cases"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_zero = 0.0f64;
    for case in 0..100 {
        let heads = rng.random_range(1..=2);
        let shape = [
            rng.random_range(1..=2),
            heads * rng.random_range(1..=2),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        ];
        let axis = if case % 2 == 0 {
            Axis::Width
        } else {
            Axis::Height
        };
        let len = if axis == Axis::Width {
            shape[3]
        } else {
            shape[2]
        };
        let d = shape[1] / heads;
        let opts = AttentionOptions {
            heads,
            scale_logits: rng.random_bool(0.5),
        };
        let (q, k, v) = (
            rand_t(&shape, &mut rng),
            rand_t(&shape, &mut rng),
            rand_t(&shape, &mut rng),
        );
        let span = 2 * len - 1;
        let zeros = Tables {
            q: Tensor::zeros([d, span]),
            k: Tensor::zeros([d, span]),
            v: Tensor::zeros([d, span]),
            per_head: false,
        };
        let got = run_axial(&q, &k, &v, Some(&zeros), axis, opts).map_err(|e| e.to_string())?;
        worst_zero = worst_zero.max(max_diff(&got, &nonlocal_along_axis(&q, &k, &v, axis, opts)));
    }
    check(worst_zero < 1e-6, || {
        format!("zero-table mismatch {worst_zero:.2e}")
    })?;
    Ok(format!("{cases} shapes up to 2x3x4x4 max diff {worst:.1e}; 100 zero-table cases max diff {worst_zero:.1e}"))
}

/// MACs of one attention call: non-local over the image, or a height pass plus a width pass
/// (optionally with relative-position tables).
fn attention_macs(size: usize, axial: bool, positional: bool) -> Result<u64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
    let shape = vec![1, 8, size, size];
    let tape = Tape::new();
    let t =
        |rng: &mut ChaCha8Rng| tape.constant(Tensor::<f32>::uniform(shape.clone(), -1.0, 1.0, rng));
    let (q, k, v) = (t(&mut rng), t(&mut rng), t(&mut rng));
    let opts = AttentionOptions {
        heads: 1,
        scale_logits: true,
    };
    let span = 2 * size - 1;
    let tables = || {
        positional.then(|| EmbeddingTables {
            q: tape.constant(Tensor::zeros([8, span])),
            k: tape.constant(Tensor::zeros([8, span])),
            v: tape.constant(Tensor::zeros([8, span])),
        })
    };
    reset_mac_count();
    if axial {
        let y = axial_position_sensitive_attention(q, k, v, tables(), Axis::Height, opts)
            .map_err(|e| e.to_string())?;
        axial_position_sensitive_attention(q, k, y, tables(), Axis::Width, opts)
            .map_err(|e| e.to_string())?;
    } else {
        nonlocal_attention(q, k, v, opts).map_err(|e| e.to_string())?;
    }
    Ok(mac_count())
}

fn mac_ratio() -> Outcome {
    let (mut parts, mut positional) = (Vec::new(), 0.0);
    for size in [8usize, 16, 32, 64] {
        let nonlocal = attention_macs(size, false, false)? as f64;
        let ratio = attention_macs(size, true, false)? as f64 / nonlocal;
        positional = attention_macs(size, true, true)? as f64 / nonlocal / ratio;
        let expected = (2 * size) as f64 / (size * size) as f64;
        let rel = (ratio - expected).abs() / expected;
        check(rel <= 0.10, || {
            format!("H=W={size}: ratio {ratio:.5} vs {expected:.5}")
        })?;
        parts.push(format!("{size}: {ratio:.4}/{expected:.4}"));
    }
    Ok(format!(
        "axial/non-local MACs vs (H+W)/HW at H=W {}; position tables multiply the axial count by {positional:.2}",
        parts.join(", ")
    ))
}

fn blob(h: usize, w: usize, y: usize, x: usize) -> Mask {
    Mask::from_fn(h, w, |r, c| r.abs_diff(y) <= 1 && c.abs_diff(x) <= 1)
}

fn metrics_brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut items = Vec::new();
    while items.len() < 200 {
        let density = rng.random_range(0.02..0.2);
        let label = random_mask(&mut rng, 16, 16, density);
        if label.count() == 0 {
            continue;
        }
        let flips = random_mask(&mut rng, 16, 16, 0.05);
        let pred = Mask::from_fn(16, 16, |r, c| label.get(r, c) ^ flips.get(r, c));
        items.push((format!("r{}", items.len()), pred, label));
    }
    let pairs: Vec<(Mask, Mask)> = items
        .iter()
        .map(|(_, p, l)| (p.clone(), l.clone()))
        .collect();
    let want = brute_metrics(&pairs);
    let got = evaluate(&items, &MetricsConfig::default()).map_err(|e| e.to_string())?;
    for (row, b) in got.rows.iter().zip(&want.images) {
        check(
            (
                row.counts.t,
                row.counts.p,
                row.counts.tp,
                row.n_label_targets,
                row.n_pred_targets,
                row.n_matched,
                row.false_pixels,
            ) == (
                b.t,
                b.p,
                b.tp,
                b.n_label,
                b.n_pred,
                b.n_matched,
                b.false_pixels,
            ),
            || format!("counts differ on {}", row.id),
        )?;
    }
    let ratios = [
        ("iou", got.iou, want.iou),
        ("niou", got.niou, want.niou),
        ("f1", got.f1, want.f1),
        ("pd", got.pd, want.pd),
        ("fa", got.fa, want.fa),
    ];
    for (name, g, w) in ratios {
        check((g - w).abs() <= 1e-12, || format!("{name} {g} vs {w}"))?;
    }

    let label = extract_targets(&blob(20, 40, 10, 10));
    let at = |dx: f64| {
        vec![Target {
            centroid: (10.0, 10.0 + dx),
            pixels: vec![(10, 13)],
        }]
    };
    let near = match_targets(label.clone(), at(2.9), 800, 3.0);
    let far = match_targets(label, at(3.0), 800, 3.0);
    check(near.t_correct == 1 && far.t_correct == 0, || {
        "2.9/3.0 px threshold wrong".into()
    })?;
    Ok(format!("200 pairs: counts exact, ratios within 1e-12 (iou {:.4} pd {:.4}); 2.9 px matches, 3.0 px does not", got.iou, got.pd))
}

fn round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for factor in [1usize, 2, 4] {
        let x = Tensor::<f32>::uniform(vec![2, 3, 8, 16], -1.0, 1.0, &mut rng);
        let back = merge_tensor(
            &split_tensor(&x, factor).map_err(|e| e.to_string())?,
            factor,
        )
        .map_err(|e| e.to_string())?;
        let same = x.shape() == back.shape()
            && x.data()
                .iter()
                .zip(back.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        check(same, || {
            format!("patch round trip changed values at factor {factor}")
        })?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut store = ParamStore::<f32>::new();
    MpaNet::new(MpaNetConfig::default(), &mut store, &mut rng).map_err(|e| e.to_string())?;
    let ck = Checkpoint {
        params: store.to_named(),
        moments: Vec::new(),
        adam_step: 7,
        epoch: 3,
        best_val_niou: 0.5,
    };
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ck.save(&a).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&a).map_err(|e| e.to_string())?;
    loaded.save(&b).map_err(|e| e.to_string())?;
    let (ba, bb) = (
        std::fs::read(&a).map_err(|e| e.to_string())?,
        std::fs::read(&b).map_err(|e| e.to_string())?,
    );
    check(loaded == ck && ba == bb, || {
        "checkpoint round trip differs".into()
    })?;

    let img = Image::from_fn(37, 53, |_, _| rng.random::<f32>());
    let q = quantize(&img);
    let path = dir.path().join("x.pgm");
    save_raster(&q, &path).map_err(|e| e.to_string())?;
    let back = load_raster(&path).map_err(|e| e.to_string())?;
    check(back == q && quantize(&dequantize(&back)) == q, || {
        "raster round trip differs".into()
    })?;
    Ok(format!("patch split/merge bit-exact at factors 1, 2, 4; checkpoint of {} bytes reloads byte-identical; 8-bit raster identical", ba.len()))
}

/// Smallest test IoU and Pd the smoke configuration has to reach. The reference run (best
/// validation checkpoint, epoch 9 of 10) reached IoU 0.848 and Pd 1.0; the floor leaves room
/// for float differences across machines while staying above the 0.5 / 0.9 requirement.
const PINNED_IOU_FLOOR: f64 = 0.70;
const PINNED_PD_FLOOR: f64 = 0.95;

fn learning_smoke() -> Outcome {
    let start = Instant::now();
    let samples = generate_synthetic(&SyntheticSceneConfig::sized(64, 64, 1), 200)
        .map_err(|e| e.to_string())?;
    let split = split_dataset(samples, (3, 1, 1), 1).map_err(|e| e.to_string())?;
    let config = MpaNetConfig {
        channels: vec![8, 16, 32],
        heads: 2,
        ..MpaNetConfig::default()
    }
    .with_input_size(64, 64);
    let mut store = ParamStore::<f32>::new();
    let model = MpaNet::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 4,
        adam: AdamConfig {
            lr: 5e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = train(&model, &mut store, &split, &cfg, None).map_err(|e| e.to_string())?;
    out.best
        .restore(&mut store, None)
        .map_err(|e| e.to_string())?;
    let report =
        evaluate_model(&model, &store, &split.test, &cfg.metrics, 8).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let summary = format!(
        "{} epochs, best val epoch {}: test IoU {:.3} nIoU {:.3} Pd {:.3} Fa {:.2}e-6 in {elapsed:.0?}",
        out.log.len(),
        out.best.epoch,
        report.iou,
        report.niou,
        report.pd,
        report.fa_e6()
    );
    check(elapsed < Duration::from_secs(15 * 60), || {
        format!("too slow: {summary}")
    })?;
    check(report.iou >= 0.5 && report.pd >= 0.9, || {
        format!("below requirement: {summary}")
    })?;
    check(
        report.iou >= PINNED_IOU_FLOOR && report.pd >= PINNED_PD_FLOOR,
        || format!("below pinned floor: {summary}"),
    )?;
    Ok(summary)
}

fn ground_truth_is_perfect() -> Outcome {
    let samples = generate_synthetic(&SyntheticSceneConfig::sized(64, 64, 7), 50)
        .map_err(|e| e.to_string())?;
    let items: Vec<(String, Mask, Mask)> = samples
        .into_iter()
        .map(|s| (s.id, s.mask.clone(), s.mask))
        .collect();
    let r = evaluate(&items, &MetricsConfig::default()).map_err(|e| e.to_string())?;
    check(
        (r.iou, r.niou, r.f1, r.pd, r.fa) == (1.0, 1.0, 1.0, 1.0, 0.0),
        || {
            format!(
                "iou {} niou {} f1 {} pd {} fa {}",
                r.iou, r.niou, r.f1, r.pd, r.fa
            )
        },
    )?;
    Ok("50 synthetic masks: IoU = nIoU = F1 = Pd = 1, Fa = 0 exactly".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("gradients", gradients),
        ("attention oracles", attention_oracles),
        ("mac ratio", mac_ratio),
        ("metrics brute force", metrics_brute_force),
        ("round trips", round_trips),
        ("learning smoke", learning_smoke),
        ("ground truth self-score", ground_truth_is_perfect),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match run() {
            Ok(detail) => println!("acceptance {} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("acceptance {} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
