//! Registered gradient checks: one entry per differentiable op, plus a whole-network check
//! that perturbs every trainable parameter of a small MPANet.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::EmbeddingTables;
use crate::attention::{
    axial_position_sensitive_attention, nonlocal_attention, qkv_project, AttentionOptions, Axis,
};
use crate::autodiff::gradcheck::{
    grad_check, probe_indices, Discrepancy, GradCheckConfig, GradCheckReport,
};
use crate::autodiff::nn::{
    batch_norm2d, conv2d, max_pool2x2, upsample2x, BnMode, Conv2dGeometry, RunningStats, Upsample,
};
use crate::autodiff::{concat, Tape, Var};
use crate::error::Result;
use crate::network::{patch_merge, patch_split, MpaNet, MpaNetConfig};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;
use crate::training::{bce_loss, soft_iou_loss};

/// Elementwise ops, matmul and conv must agree to this relative error.
pub const OP_TOL: f64 = 1e-4;
/// Batch normalization and the full network.
pub const COMPOSITE_TOL: f64 = 1e-3;

type OpFn = for<'t> fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>;

pub struct OpCheck {
    pub name: &'static str,
    pub tol: f64,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    f: OpFn,
}

impl OpCheck {
    /// Checks the op on inputs drawn from `seed`. The op output is contracted with a fixed
    /// random tensor so every output element contributes to the scalar being differentiated.
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (self.inputs)(&mut rng);
        let f = self.f;
        grad_check(
            |xs| contract(f(xs)?, seed),
            &inputs,
            GradCheckConfig::with_tol(self.tol),
        )
    }
}

fn contract<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mix = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
    Ok(y.mul(y.tape().constant(mix))?.sum())
}

fn u(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("extents match")
}

/// Distinct values at least 0.04 apart, so no pooling window has a near-tie.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let data = order
        .iter()
        .map(|&k| k as f64 * 0.05 - 1.0 + rng.random_range(0.0..0.01))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("extents match")
}

fn pair(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    vec![u(shape, rng), u(shape, rng)]
}

fn one(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    vec![u(shape, rng)]
}

fn conv_inputs(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize) -> Vec<Tensor<f64>> {
    vec![
        u(&[2, c_in, 5, 6], rng),
        u(&[c_out, c_in, k, k], rng),
        u(&[c_out], rng),
    ]
}

fn bn<'t>(xs: &[Var<'t, f64>], mode: BnMode) -> Result<Var<'t, f64>> {
    let c = xs[1].shape()[0];
    let running = RunningStats {
        mean: Tensor::full([c], 0.2),
        var: Tensor::full([c], 1.5),
    };
    Ok(batch_norm2d(xs[0], xs[1], xs[2], &running, mode)?.0)
}

fn bn_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    vec![
        u(&[3, 2, 4, 4], rng),
        away_from_zero(&[2], 0.5, 1.5, rng),
        u(&[2], rng),
    ]
}

fn attention_inputs(rng: &mut ChaCha8Rng, tables: Option<(usize, bool)>) -> Vec<Tensor<f64>> {
    let mut v = vec![
        u(&[2, 4, 3, 4], rng),
        u(&[2, 4, 3, 4], rng),
        u(&[2, 4, 3, 4], rng),
    ];
    if let Some((len, per_head)) = tables {
        let shape = if per_head {
            vec![2, 2, 2 * len - 1]
        } else {
            vec![2, 2 * len - 1]
        };
        v.extend((0..3).map(|_| u(&shape, rng)));
    }
    v
}

fn axial<'t>(xs: &[Var<'t, f64>], axis: Axis) -> Result<Var<'t, f64>> {
    let tables = EmbeddingTables {
        q: xs[3],
        k: xs[4],
        v: xs[5],
    };
    axial_position_sensitive_attention(
        xs[0],
        xs[1],
        xs[2],
        Some(tables),
        axis,
        AttentionOptions {
            heads: 2,
            scale_logits: true,
        },
    )
}

/// Every registered op check.
pub fn op_checks() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "add",
            tol: OP_TOL,
            inputs: |r| pair(&[2, 3, 4], r),
            f: |x| x[0].add(x[1]),
        },
        OpCheck {
            name: "sub",
            tol: OP_TOL,
            inputs: |r| pair(&[2, 3, 4], r),
            f: |x| x[0].sub(x[1]),
        },
        OpCheck {
            name: "mul",
            tol: OP_TOL,
            inputs: |r| pair(&[2, 3, 4], r),
            f: |x| x[0].mul(x[1]),
        },
        OpCheck {
            name: "div",
            tol: OP_TOL,
            inputs: |r| vec![u(&[2, 3, 4], r), away_from_zero(&[2, 3, 4], 0.5, 1.5, r)],
            f: |x| x[0].div(x[1]),
        },
        OpCheck {
            name: "scale",
            tol: OP_TOL,
            inputs: |r| one(&[3, 4], r),
            f: |x| Ok(x[0].scale(1.7)),
        },
        OpCheck {
            name: "add_scalar",
            tol: OP_TOL,
            inputs: |r| one(&[3, 4], r),
            f: |x| Ok(x[0].add_scalar(-0.3)),
        },
        OpCheck {
            name: "neg",
            tol: OP_TOL,
            inputs: |r| one(&[3, 4], r),
            f: |x| Ok(x[0].neg()),
        },
        OpCheck {
            name: "relu",
            tol: OP_TOL,
            inputs: |r| vec![away_from_zero(&[3, 4, 5], 0.05, 1.0, r)],
            f: |x| Ok(x[0].relu()),
        },
        OpCheck {
            name: "sigmoid",
            tol: OP_TOL,
            inputs: |r| vec![Tensor::uniform(vec![3, 4, 5], -4.0, 4.0, r)],
            f: |x| Ok(x[0].sigmoid()),
        },
        OpCheck {
            name: "exp",
            tol: OP_TOL,
            inputs: |r| one(&[3, 4], r),
            f: |x| Ok(x[0].exp()),
        },
        OpCheck {
            name: "ln",
            tol: OP_TOL,
            inputs: |r| vec![Tensor::uniform(vec![3, 4], 0.3, 2.0, r)],
            f: |x| Ok(x[0].ln()),
        },
        OpCheck {
            name: "clamp",
            tol: OP_TOL,
            // magnitudes avoid the clamp bounds at ±0.5
            inputs: |r| {
                vec![
                    away_from_zero(&[4, 5], 0.0, 0.45, r),
                    away_from_zero(&[4, 5], 0.55, 1.0, r),
                ]
            },
            f: |x| x[0].clamp(-0.5, 0.5).add(x[1].clamp(-0.5, 0.5)),
        },
        OpCheck {
            name: "sum",
            tol: OP_TOL,
            inputs: |r| one(&[2, 3, 4], r),
            f: |x| Ok(x[0].sum()),
        },
        OpCheck {
            name: "mean",
            tol: OP_TOL,
            inputs: |r| one(&[2, 3, 4], r),
            f: |x| Ok(x[0].mean()),
        },
        OpCheck {
            name: "matmul",
            tol: OP_TOL,
            inputs: |r| vec![u(&[3, 4], r), u(&[4, 5], r)],
            f: |x| x[0].matmul(x[1]),
        },
        OpCheck {
            name: "bmm",
            tol: OP_TOL,
            inputs: |r| vec![u(&[2, 3, 4], r), u(&[2, 4, 5], r)],
            f: |x| x[0].bmm(x[1]),
        },
        OpCheck {
            name: "softmax.axis0",
            tol: OP_TOL,
            inputs: |r| one(&[3, 4, 5], r),
            f: |x| x[0].softmax(0),
        },
        OpCheck {
            name: "softmax.axis1",
            tol: OP_TOL,
            inputs: |r| one(&[3, 4, 5], r),
            f: |x| x[0].softmax(1),
        },
        OpCheck {
            name: "softmax.axis2",
            tol: OP_TOL,
            inputs: |r| one(&[3, 4, 5], r),
            f: |x| x[0].softmax(2),
        },
        OpCheck {
            name: "reshape",
            tol: OP_TOL,
            inputs: |r| one(&[2, 3, 4], r),
            f: |x| x[0].reshape([4, 6]),
        },
        OpCheck {
            name: "take",
            tol: OP_TOL,
            inputs: |r| one(&[2, 3], r),
            f: |x| x[0].take(Rc::new(vec![5, 0, 0, 3, 5, 2, 1, 1]), [2, 4]),
        },
        OpCheck {
            name: "permute",
            tol: OP_TOL,
            inputs: |r| one(&[2, 3, 4], r),
            f: |x| x[0].permute(&[2, 0, 1]),
        },
        OpCheck {
            name: "concat",
            tol: OP_TOL,
            inputs: |r| vec![u(&[2, 2, 3], r), u(&[2, 3, 3], r)],
            f: |x| concat(&[x[0], x[1]], 1),
        },
        OpCheck {
            name: "conv2d.3x3.same",
            tol: OP_TOL,
            inputs: |r| conv_inputs(r, 2, 3, 3),
            f: |x| conv2d(x[0], x[1], Some(x[2]), Conv2dGeometry::same(3)),
        },
        OpCheck {
            name: "conv2d.3x3.stride2",
            tol: OP_TOL,
            inputs: |r| conv_inputs(r, 2, 3, 3),
            f: |x| {
                conv2d(
                    x[0],
                    x[1],
                    Some(x[2]),
                    Conv2dGeometry {
                        stride: 2,
                        padding: 1,
                    },
                )
            },
        },
        OpCheck {
            name: "conv2d.5x5.valid",
            tol: OP_TOL,
            inputs: |r| conv_inputs(r, 1, 2, 5),
            f: |x| {
                conv2d(
                    x[0],
                    x[1],
                    Some(x[2]),
                    Conv2dGeometry {
                        stride: 1,
                        padding: 0,
                    },
                )
            },
        },
        OpCheck {
            name: "conv2d.1x1",
            tol: OP_TOL,
            inputs: |r| conv_inputs(r, 3, 2, 1),
            f: |x| conv2d(x[0], x[1], None, Conv2dGeometry::same(1)),
        },
        OpCheck {
            name: "batchnorm.train",
            tol: COMPOSITE_TOL,
            inputs: bn_inputs,
            f: |x| bn(x, BnMode::Train),
        },
        OpCheck {
            name: "batchnorm.eval",
            tol: COMPOSITE_TOL,
            inputs: bn_inputs,
            f: |x| bn(x, BnMode::Eval),
        },
        OpCheck {
            name: "maxpool2x2",
            tol: OP_TOL,
            inputs: |r| vec![distinct(&[2, 2, 4, 6], r)],
            f: |x| max_pool2x2(x[0]),
        },
        OpCheck {
            name: "upsample.nearest",
            tol: OP_TOL,
            inputs: |r| one(&[1, 2, 3, 4], r),
            f: |x| upsample2x(x[0], Upsample::Nearest),
        },
        OpCheck {
            name: "upsample.bilinear",
            tol: OP_TOL,
            inputs: |r| one(&[1, 2, 3, 4], r),
            f: |x| upsample2x(x[0], Upsample::Bilinear),
        },
        OpCheck {
            name: "patch_split",
            tol: OP_TOL,
            inputs: |r| one(&[2, 2, 4, 6], r),
            f: |x| patch_split(x[0], 2),
        },
        OpCheck {
            name: "patch_merge",
            tol: OP_TOL,
            inputs: |r| one(&[8, 2, 2, 3], r),
            f: |x| patch_merge(x[0], 2),
        },
        OpCheck {
            name: "soft_iou_loss",
            tol: OP_TOL,
            inputs: |r| {
                vec![
                    Tensor::uniform(vec![2, 1, 4, 4], 0.05, 0.95, r),
                    Tensor::uniform(vec![2, 1, 4, 4], 0.0, 1.0, r),
                ]
            },
            f: |x| soft_iou_loss(x[0], x[1]),
        },
        OpCheck {
            name: "bce_loss",
            tol: OP_TOL,
            inputs: |r| {
                vec![
                    Tensor::uniform(vec![2, 1, 4, 4], 0.05, 0.95, r),
                    Tensor::uniform(vec![2, 1, 4, 4], 0.0, 1.0, r),
                ]
            },
            f: |x| bce_loss(x[0], x[1]),
        },
        OpCheck {
            name: "qkv_project",
            tol: OP_TOL,
            inputs: |r| {
                vec![
                    u(&[2, 3, 2, 3], r),
                    u(&[4, 3, 1, 1], r),
                    u(&[4, 3, 1, 1], r),
                    u(&[2, 3, 1, 1], r),
                ]
            },
            f: |x| {
                let (q, k, v) = qkv_project(x[0], x[1], x[2], x[3])?;
                concat(&[q, k, v], 1)
            },
        },
        OpCheck {
            name: "nonlocal_attention",
            tol: OP_TOL,
            inputs: |r| attention_inputs(r, None),
            f: |x| {
                nonlocal_attention(
                    x[0],
                    x[1],
                    x[2],
                    AttentionOptions {
                        heads: 2,
                        scale_logits: true,
                    },
                )
            },
        },
        OpCheck {
            name: "axial_attention.height.per_head",
            tol: OP_TOL,
            inputs: |r| attention_inputs(r, Some((3, true))),
            f: |x| axial(x, Axis::Height),
        },
        OpCheck {
            name: "axial_attention.width.shared",
            tol: OP_TOL,
            inputs: |r| attention_inputs(r, Some((4, false))),
            f: |x| axial(x, Axis::Width),
        },
    ]
}

/// Configuration of the network used by [`network_check`].
pub fn tiny_network_config() -> MpaNetConfig {
    MpaNetConfig {
        channels: vec![4, 8],
        heads: 2,
        ..MpaNetConfig::default()
    }
    .with_input_size(16, 16)
}

/// Central-difference check of every trainable parameter of a freshly initialized network,
/// on a 1×1×16×16 input with the soft-IoU loss against a random mask. `max_coords` bounds
/// the probed entries per parameter tensor.
pub fn network_check(seed: u64, max_coords: Option<usize>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let model = MpaNet::new(tiny_network_config(), &mut store, &mut rng)?;
    let image = Tensor::uniform(vec![1, 1, 16, 16], 0.0, 1.0, &mut rng);
    let mask = Tensor::from_fn(
        [1, 1, 16, 16],
        |_| if rng.random_bool(0.1) { 1.0 } else { 0.0 },
    );

    let loss_of = |store: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::train(&tape, store);
        let h = model.forward(&ctx, ctx.input(image.clone()))?;
        Ok(soft_iou_loss(h, ctx.input(mask.clone()))?.value().item())
    };

    let tape = Tape::new();
    let ctx = Ctx::train(&tape, &store);
    let h = model.forward(&ctx, ctx.input(image.clone()))?;
    let loss = soft_iou_loss(h, ctx.input(mask.clone()))?;
    let grads = tape.backward(loss)?;
    let analytic = ctx.param_grads(&grads);
    drop(ctx);

    let cfg = GradCheckConfig::with_tol(COMPOSITE_TOL);
    let base = loss_of(&store)?;
    let mut report = GradCheckReport::empty(cfg.tol);
    let mut probe = store.clone();
    for (input, (id, grad)) in analytic.iter().enumerate() {
        for index in probe_indices(grad.numel(), max_coords, &mut rng) {
            let orig = probe.get(*id).data()[index];
            let mut eps = cfg.eps;
            let numeric = loop {
                probe.get_mut(*id).data_mut()[index] = orig + eps;
                let plus = loss_of(&probe)?;
                probe.get_mut(*id).data_mut()[index] = orig - eps;
                let minus = loss_of(&probe)?;
                probe.get_mut(*id).data_mut()[index] = orig;
                let (right, left) = ((plus - base) / eps, (base - minus) / eps);
                let central = (plus - minus) / (2.0 * eps);
                let analytic = grad.data()[index];
                let miss = (central - analytic).abs();
                // A ReLU or max-pool switch inside [x − eps, x + eps] bends the loss, so the
                // one-sided slopes disagree by at least the miss. A wrong analytic gradient at a
                // smooth point leaves them in agreement and still fails.
                let failed = miss > cfg.tol * analytic.abs().max(central.abs()).max(cfg.floor);
                if failed && (right - left).abs() >= miss && eps > cfg.eps * 0.02 {
                    eps /= 10.0;
                    report.refined += 1;
                    continue;
                }
                break central;
            };
            report.observe(
                Discrepancy {
                    input,
                    index,
                    analytic: grad.data()[index],
                    numeric,
                },
                cfg.floor,
            );
        }
    }
    Ok(report)
}
