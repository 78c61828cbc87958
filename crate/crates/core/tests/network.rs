use mpanet::attention::{
    axial_position_sensitive_attention, qkv_project, AttentionOptions, Axis, EmbeddingTables,
};
use mpanet::autodiff::nn::{
    batch_norm2d, conv2d, max_pool2x2, upsample2x, Conv2dGeometry, RunningStats, Upsample,
};
use mpanet::autodiff::{concat, Tape, Var};
use mpanet::gradsuite::network_check;
use mpanet::network::{merge_tensor, predict_mask, split_tensor, MpaNet, MpaNetConfig};
use mpanet::params::{Ctx, ParamKind, ParamStore};
use mpanet::raster::Image;
use mpanet::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn build(cfg: MpaNetConfig, seed: u64) -> (MpaNet, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let model = MpaNet::new(cfg, &mut store, &mut rng(seed)).unwrap();
    (model, store)
}

fn small_cfg() -> MpaNetConfig {
    MpaNetConfig {
        channels: vec![4, 8],
        heads: 2,
        ..MpaNetConfig::default()
    }
    .with_input_size(16, 16)
}

/// Gives every batch-norm buffer a non-trivial value so eval mode is not the identity.
fn randomize_buffers(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for id in store.ids().collect::<Vec<_>>() {
        if store.kind(id) == ParamKind::Buffer {
            let shape = store.get(id).shape().to_vec();
            store
                .set(id, Tensor::uniform(shape, 0.5, 1.5, &mut r))
                .unwrap();
        }
    }
}

#[test]
fn patch_split_examples() {
    let mut r = rng(0);
    let x = Tensor::<f64>::uniform(vec![2, 3, 4, 6], -1.0, 1.0, &mut r);
    assert_eq!(split_tensor(&x, 1).unwrap().data(), x.data());

    let ramp = Tensor::from_fn([1, 1, 4, 4], |i| i as f64);
    let p = split_tensor(&ramp, 2).unwrap();
    assert_eq!(p.shape(), &[4, 1, 2, 2]);
    let want = [
        0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0, 8.0, 9.0, 12.0, 13.0, 10.0, 11.0, 14.0, 15.0,
    ];
    assert_eq!(p.data(), &want);
    assert_eq!(merge_tensor(&p, 2).unwrap().data(), ramp.data());

    let x = Tensor::<f64>::uniform(vec![1, 3, 8, 8], -1.0, 1.0, &mut r);
    let p = split_tensor(&x, 4).unwrap();
    assert_eq!(p.shape(), &[16, 3, 2, 2]);
    let mut a: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
    let mut b: Vec<u64> = p.data().iter().map(|v| v.to_bits()).collect();
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);

    assert!(matches!(split_tensor(&x, 3), Err(Error::Dimension { .. })));
    assert!(matches!(merge_tensor(&p, 3), Err(Error::Dimension { .. })));
}

proptest! {
    #[test]
    fn patch_round_trip_is_bit_exact(n in 1usize..3, c in 1usize..4, f in 1usize..5, ph in 1usize..4, pw in 1usize..4, seed in any::<u64>()) {
        let x = Tensor::<f32>::uniform(vec![n, c, ph * f, pw * f], -1.0, 1.0, &mut rng(seed));
        let p = split_tensor(&x, f).unwrap();
        prop_assert_eq!(p.shape(), &[n * f * f, c, ph, pw]);
        let back = merge_tensor(&p, f).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

fn p<'t>(ctx: &Ctx<'t, '_, f64>, name: &str) -> Var<'t, f64> {
    ctx.param(
        ctx.store()
            .id(name)
            .unwrap_or_else(|| panic!("missing {name}")),
    )
}

fn cbr<'t>(ctx: &Ctx<'t, '_, f64>, x: Var<'t, f64>, prefix: &str) -> Var<'t, f64> {
    let y = conv2d(
        x,
        p(ctx, &format!("{prefix}.conv.w")),
        Some(p(ctx, &format!("{prefix}.conv.b"))),
        Conv2dGeometry::same(3),
    )
    .unwrap();
    let s = ctx.store();
    let running = RunningStats {
        mean: s
            .get(s.id(&format!("{prefix}.bn.running_mean")).unwrap())
            .clone(),
        var: s
            .get(s.id(&format!("{prefix}.bn.running_var")).unwrap())
            .clone(),
    };
    let g = p(ctx, &format!("{prefix}.bn.gamma"));
    let b = p(ctx, &format!("{prefix}.bn.beta"));
    batch_norm2d(y, g, b, &running, ctx.mode())
        .unwrap()
        .0
        .relu()
}

fn axial_layer<'t>(
    ctx: &Ctx<'t, '_, f64>,
    x: Var<'t, f64>,
    prefix: &str,
    axis: Axis,
    heads: usize,
) -> Var<'t, f64> {
    let (q, k, v) = qkv_project(
        x,
        p(ctx, &format!("{prefix}.wq")),
        p(ctx, &format!("{prefix}.wk")),
        p(ctx, &format!("{prefix}.wv")),
    )
    .unwrap();
    let tables = EmbeddingTables {
        q: p(ctx, &format!("{prefix}.rq")),
        k: p(ctx, &format!("{prefix}.rk")),
        v: p(ctx, &format!("{prefix}.rv")),
    };
    let y = axial_position_sensitive_attention(
        q,
        k,
        v,
        Some(tables),
        axis,
        AttentionOptions {
            heads,
            scale_logits: true,
        },
    )
    .unwrap();
    conv2d(
        y,
        p(ctx, &format!("{prefix}.wo")),
        None,
        Conv2dGeometry::same(1),
    )
    .unwrap()
}

fn axial_block<'t>(
    ctx: &Ctx<'t, '_, f64>,
    x: Var<'t, f64>,
    prefix: &str,
    heads: usize,
) -> Var<'t, f64> {
    let h = axial_layer(ctx, x, &format!("{prefix}.height"), Axis::Height, heads);
    axial_layer(ctx, h, &format!("{prefix}.width"), Axis::Width, heads)
        .add(x)
        .unwrap()
}

#[test]
fn global_branch_matches_step_by_step_composition() {
    let (model, store) = build(small_cfg(), 1);
    let x = Tensor::uniform(vec![1, 1, 16, 16], 0.0, 1.0, &mut rng(2));
    let tape = Tape::new();
    let ctx = Ctx::train(&tape, &store);
    let got = model.global.forward(&ctx, ctx.input(x.clone())).unwrap();

    let tape2 = Tape::new();
    let c2 = Ctx::train(&tape2, &store);
    let a0 = axial_block(&c2, cbr(&c2, c2.input(x), "global.stage0.enc"), "attn.0", 2);
    let a1 = axial_block(
        &c2,
        cbr(&c2, max_pool2x2(a0).unwrap(), "global.stage1.enc"),
        "attn.1",
        2,
    );
    let up = upsample2x(a1, Upsample::Nearest).unwrap();
    let want = cbr(&c2, concat(&[up, a0], 1).unwrap(), "global.stage0.dec");

    assert_eq!(got.shape(), vec![1, 4, 16, 16]);
    assert!(got.value().max_abs_diff(&want.value()) < 1e-5);
}

#[test]
fn global_branch_zero_final_weights_give_constant_channels() {
    let (model, mut store) = build(small_cfg(), 3);
    let id = store.id("global.stage0.dec.conv.w").unwrap();
    store.set(id, Tensor::zeros([4, 12, 3, 3])).unwrap();
    let x = Tensor::uniform(vec![2, 1, 16, 16], 0.0, 1.0, &mut rng(4));
    let tape = Tape::new();
    let ctx = Ctx::train(&tape, &store);
    let y = model.global.forward(&ctx, ctx.input(x)).unwrap().value();
    for plane in y.data().chunks(256) {
        assert!(plane.iter().all(|&v| v == plane[0]));
    }
}

#[test]
fn local_branch_matches_per_patch_loop() {
    let (model, mut store) = build(small_cfg(), 5);
    randomize_buffers(&mut store, 6);
    let x = Tensor::uniform(vec![2, 1, 16, 16], 0.0, 1.0, &mut rng(7));
    for branch in &model.locals {
        let f = branch.factor;
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let merged = branch.forward(&ctx, ctx.input(x.clone())).unwrap().value();
        assert_eq!(merged.shape(), &[2, 4, 16, 16]);

        let (ph, pw) = (16 / f, 16 / f);
        for n in 0..2 {
            for py in 0..f {
                for px in 0..f {
                    let patch = Tensor::from_fn([1, 1, ph, pw], |i| {
                        x.at(&[n, 0, py * ph + i / pw, px * pw + i % pw])
                    });
                    let tape = Tape::new();
                    let ctx = Ctx::eval(&tape, &store);
                    let out = branch.encode(&ctx, ctx.input(patch)).unwrap().value();
                    for c in 0..4 {
                        for i in 0..ph {
                            for j in 0..pw {
                                let got = merged.at(&[n, c, py * ph + i, px * pw + j]);
                                assert!((got - out.at(&[0, c, i, j])).abs() < 1e-6);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn local_branch_shares_weights_across_patches() {
    let (model, mut store) = build(small_cfg(), 8);
    randomize_buffers(&mut store, 9);
    let branch = &model.locals[0];
    let tile = Tensor::<f64>::uniform(vec![1, 1, 4, 4], 0.0, 1.0, &mut rng(10));
    let patches = Tensor::from_fn([16, 1, 4, 4], |i| tile.data()[i % 16]);
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &store);
    let out = branch
        .encode(&ctx, ctx.input(patches.clone()))
        .unwrap()
        .value();
    let per = out.numel() / 16;
    for k in 1..16 {
        assert_eq!(&out.data()[k * per..(k + 1) * per], &out.data()[..per]);
    }

    // permuting the patch batch and undoing the permutation leaves the result unchanged
    let distinct = Tensor::<f64>::uniform(vec![16, 1, 4, 4], 0.0, 1.0, &mut rng(11));
    let perm: Vec<usize> = vec![3, 15, 0, 7, 12, 1, 9, 4, 14, 2, 11, 6, 8, 13, 5, 10];
    let shuffled = Tensor::from_fn([16, 1, 4, 4], |i| {
        distinct.data()[perm[i / 16] * 16 + i % 16]
    });
    let a = branch.encode(&ctx, ctx.input(distinct)).unwrap().value();
    let b = branch.encode(&ctx, ctx.input(shuffled)).unwrap().value();
    for (k, &src) in perm.iter().enumerate() {
        assert_eq!(
            &b.data()[k * per..(k + 1) * per],
            &a.data()[src * per..(src + 1) * per]
        );
    }
}

/// Eval-mode CBR with explicit loops: 3×3 same convolution, affine running-stat normalization, ReLU.
fn cbr_loops(x: &Tensor<f64>, store: &ParamStore<f64>, prefix: &str) -> Tensor<f64> {
    let get = |n: &str| {
        store
            .get(store.id(&format!("{prefix}.{n}")).unwrap())
            .clone()
    };
    let (w, b) = (get("conv.w"), get("conv.b"));
    let (g, beta, rm, rv) = (
        get("bn.gamma"),
        get("bn.beta"),
        get("bn.running_mean"),
        get("bn.running_var"),
    );
    let [n, c_in, h, wd] = *x.shape() else {
        unreachable!()
    };
    let c_out = w.shape()[0];
    Tensor::from_fn([n, c_out, h, wd], |flat| {
        let (s, o, i, j) = (
            flat / (c_out * h * wd),
            (flat / (h * wd)) % c_out,
            (flat / wd) % h,
            flat % wd,
        );
        let mut acc = b.data()[o];
        for c in 0..c_in {
            for di in 0..3 {
                for dj in 0..3 {
                    let (yi, xj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                    if yi >= 0 && xj >= 0 && (yi as usize) < h && (xj as usize) < wd {
                        acc += w.at(&[o, c, di, dj]) * x.at(&[s, c, yi as usize, xj as usize]);
                    }
                }
            }
        }
        let z = (acc - rm.data()[o]) / (rv.data()[o] + 1e-5).sqrt() * g.data()[o] + beta.data()[o];
        z.max(0.0)
    })
}

fn cat_channels(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [n, ca, h, w] = *a.shape() else {
        unreachable!()
    };
    let cb = b.shape()[1];
    let plane = h * w;
    Tensor::from_fn([n, ca + cb, h, w], |i| {
        let (s, c, r) = (i / ((ca + cb) * plane), (i / plane) % (ca + cb), i % plane);
        if c < ca {
            a.data()[(s * ca + c) * plane + r]
        } else {
            b.data()[(s * cb + c - ca) * plane + r]
        }
    })
}

#[test]
fn fusion_matches_hand_composed_concat_conv() {
    let cfg = MpaNetConfig {
        channels: vec![2, 2],
        heads: 1,
        ..MpaNetConfig::default()
    }
    .with_input_size(4, 4);
    let (model, mut store) = build(cfg, 12);
    randomize_buffers(&mut store, 13);
    let mut r = rng(14);
    let [g, l2, l4]: [Tensor<f64>; 3] =
        std::array::from_fn(|_| Tensor::uniform(vec![1, 2, 4, 4], -1.0, 1.0, &mut r));
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &store);
    // locals ordered smallest patches first
    let fused = model
        .fuse_branches(
            &ctx,
            ctx.input(g.clone()),
            &[ctx.input(l4.clone()), ctx.input(l2.clone())],
        )
        .unwrap()
        .value();
    let step = cbr_loops(&cat_channels(&l4, &l2), &store, "fuse.0");
    let want = cbr_loops(&cat_channels(&step, &g), &store, "fuse.1");
    assert_eq!(fused.shape(), &[1, 2, 4, 4]);
    assert!(fused.max_abs_diff(&want) < 1e-6);

    let bad = ctx.input(Tensor::zeros([1, 2, 2, 2]));
    let err = model
        .fuse_branches(&ctx, ctx.input(g), &[bad, ctx.input(l2)])
        .unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn fusion_selecting_global_channels_is_a_cbr_of_global_features() {
    let cfg = MpaNetConfig {
        channels: vec![2, 2],
        heads: 1,
        ..MpaNetConfig::default()
    }
    .with_input_size(4, 4);
    let (model, mut store) = build(cfg, 15);
    randomize_buffers(&mut store, 16);
    // last fusion conv: centre tap copies global channel o to output o, zero elsewhere
    let w = Tensor::from_fn([2, 4, 3, 3], |i| {
        let (o, c, tap) = (i / 36, (i / 9) % 4, i % 9);
        if c == o + 2 && tap == 4 {
            1.0
        } else {
            0.0
        }
    });
    store.set(store.id("fuse.1.conv.w").unwrap(), w).unwrap();
    let mut r = rng(17);
    let [g, l2, l4]: [Tensor<f64>; 3] =
        std::array::from_fn(|_| Tensor::uniform(vec![1, 2, 4, 4], -1.0, 1.0, &mut r));
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &store);
    let fused = model
        .fuse_branches(&ctx, ctx.input(g.clone()), &[ctx.input(l4), ctx.input(l2)])
        .unwrap()
        .value();
    let get = |n: &str| store.get(store.id(&format!("fuse.1.{n}")).unwrap()).clone();
    let (b, gm, bt, rm, rv) = (
        get("conv.b"),
        get("bn.gamma"),
        get("bn.beta"),
        get("bn.running_mean"),
        get("bn.running_var"),
    );
    for (i, &v) in fused.data().iter().enumerate() {
        let o = i / 16;
        let z = (g.data()[i] + b.data()[o] - rm.data()[o]) / (rv.data()[o] + 1e-5).sqrt()
            * gm.data()[o]
            + bt.data()[o];
        assert!((v - z.max(0.0)).abs() < 1e-12);
    }
}

#[test]
fn all_zero_parameters_give_one_half_everywhere() {
    let (model, mut store) = build(small_cfg(), 18);
    for id in store.trainable().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(shape)).unwrap();
    }
    let x = Tensor::uniform(vec![2, 1, 16, 16], 0.0, 1.0, &mut rng(19));
    let heat = model.predict(&store, x.clone()).unwrap();
    assert!(heat.data().iter().all(|&v| v == 0.5));
    let tape = Tape::new();
    let ctx = Ctx::train(&tape, &store);
    assert!(model
        .forward(&ctx, ctx.input(x))
        .unwrap()
        .value()
        .data()
        .iter()
        .all(|&v| v == 0.5));
}

#[test]
fn forward_shape_and_range_contract() {
    for (cfg, shape) in [
        (small_cfg(), [3, 1, 16, 16]),
        (
            MpaNetConfig {
                channels: vec![4, 8, 8],
                heads: 4,
                ..MpaNetConfig::default()
            }
            .with_input_size(32, 16),
            [1, 1, 32, 16],
        ),
        (
            MpaNetConfig {
                channels: vec![2],
                heads: 1,
                patch_scales: vec![4, 1, 8],
                ..MpaNetConfig::default()
            }
            .with_input_size(16, 24),
            [2, 1, 16, 24],
        ),
    ] {
        let (model, store) = build(cfg, 20);
        let x = Tensor::uniform(shape.to_vec(), 0.0, 1.0, &mut rng(21));
        let tape = Tape::new();
        let ctx = Ctx::train(&tape, &store);
        let h = model.forward(&ctx, ctx.input(x.clone())).unwrap().value();
        assert_eq!(h.shape(), &shape);
        assert!(h.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let wrong = Tensor::zeros([1, 1, shape[2] / 2, shape[3]]);
        assert!(matches!(
            model.predict(&store, wrong),
            Err(Error::Dimension { .. })
        ));
    }
}

#[test]
fn config_violations_are_config_errors() {
    let base = small_cfg();
    let bad = [
        base.clone().with_input_size(18, 16),
        MpaNetConfig {
            channels: vec![],
            ..base.clone()
        },
        MpaNetConfig {
            heads: 3,
            ..base.clone()
        },
        MpaNetConfig {
            patch_scales: vec![1, 1, 2],
            ..base.clone()
        },
        MpaNetConfig {
            patch_scales: vec![1, 2],
            ..base.clone()
        },
        MpaNetConfig {
            patch_scales: vec![1, 2, 3],
            ..base.clone()
        },
        MpaNetConfig {
            threshold: 1.0,
            ..base.clone()
        },
    ];
    for cfg in bad {
        let mut store = ParamStore::<f32>::new();
        assert!(
            matches!(
                MpaNet::new(cfg.clone(), &mut store, &mut rng(0)),
                Err(Error::Config(_))
            ),
            "{cfg:?}"
        );
    }
}

#[test]
fn every_parameter_gets_a_finite_gradient() {
    let (model, store) = build(small_cfg(), 22);
    let x = Tensor::uniform(vec![2, 1, 16, 16], 0.0, 1.0, &mut rng(23));
    let tape = Tape::new();
    let ctx = Ctx::train(&tape, &store);
    let h = model.forward(&ctx, ctx.input(x)).unwrap();
    let grads = tape.backward(h.mul(h).unwrap().mean()).unwrap();
    let pg = ctx.param_grads(&grads);
    assert_eq!(pg.len(), store.trainable().count());
    for (id, g) in &pg {
        assert!(g.all_finite(), "{}", store.name(*id));
        assert!(
            g.data().iter().any(|&v| v != 0.0),
            "{} has an all-zero gradient",
            store.name(*id)
        );
    }
}

#[test]
fn checkpoint_names_follow_the_documented_scheme() {
    let (_, store) = build(small_cfg(), 24);
    let prefixes = [
        "attn.0.",
        "attn.1.",
        "global.stage0.",
        "global.stage1.",
        "local2.",
        "local4.",
        "fuse.0.",
        "fuse.1.",
        "head.",
    ];
    for e in store.entries() {
        assert!(
            prefixes.iter().any(|p| e.name.starts_with(p)),
            "unexpected name {}",
            e.name
        );
    }
    for axis in ["height", "width"] {
        for t in ["wq", "wk", "wv", "rq", "rk", "rv"] {
            assert!(store.id(&format!("attn.1.{axis}.{t}")).is_some());
        }
    }
}

#[test]
fn full_network_gradient_check() {
    let report = network_check(3, Some(6)).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.checked > 300);
}

#[test]
fn predict_mask_examples() {
    let half = Tensor::<f32>::full([1, 1, 3, 3], 0.5);
    assert_eq!(predict_mask(&half, 0.5).unwrap()[0].count(), 0);
    assert_eq!(predict_mask(&half, 0.0).unwrap()[0].count(), 9);
    let mut r = rng(25);
    let heat = Tensor::<f64>::uniform(vec![3, 1, 7, 5], 0.0, 1.0, &mut r);
    for _ in 0..10 {
        let t: f64 = r.random_range(0.0..1.0);
        let masks = predict_mask(&heat, t).unwrap();
        for (k, m) in masks.iter().enumerate() {
            let brute = heat.data()[k * 35..(k + 1) * 35]
                .iter()
                .filter(|&&v| v > t)
                .count();
            assert_eq!(m.count(), brute);
        }
    }
}

#[test]
fn predict_image_tiles_and_crops() {
    let cfg = small_cfg();
    let mut store = ParamStore::<f32>::new();
    let model = MpaNet::new(cfg, &mut store, &mut rng(4)).unwrap();
    let mut r = rng(5);
    let image = Image::from_fn(20, 37, |_, _| r.random_range(0.0..1.0));
    let heat = model.predict_image(&store, &image).unwrap();
    assert_eq!(heat.dims(), (20, 37));

    // Tile (row 1, col 2) covers rows 16..20 and cols 32..37, zero elsewhere.
    let tile = Tensor::new(
        vec![1, 1, 16, 16],
        (0..256)
            .map(|i| {
                let (y, x) = (16 + i / 16, 32 + i % 16);
                if y < 20 && x < 37 {
                    image.get(y, x)
                } else {
                    0.0
                }
            })
            .collect(),
    )
    .unwrap();
    let want = model.predict(&store, tile).unwrap();
    for y in 16..20 {
        for x in 32..37 {
            assert_eq!(heat.get(y, x), want.data()[(y - 16) * 16 + (x - 32)]);
        }
    }

    let exact = Image::from_fn(16, 16, |y, x| image.get(y, x));
    let whole = model
        .predict(
            &store,
            Tensor::new(vec![1, 1, 16, 16], exact.pixels().to_vec()).unwrap(),
        )
        .unwrap();
    assert_eq!(
        model.predict_image(&store, &exact).unwrap().pixels(),
        whole.data()
    );
    assert!(model
        .predict_image(&store, &Image::filled(0, 4, 0.0))
        .is_err());
}
