use rand::Rng;

use super::functional::{
    axial_position_sensitive_attention, nonlocal_attention, qkv_project, EmbeddingTables,
};
use super::{AttentionOptions, AxialAttentionConfig, Axis};
use crate::autodiff::nn::{conv2d, Conv2dGeometry};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn projection<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: String,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) -> Result<ParamId> {
    let w = Tensor::randn([c_out, c_in, 1, 1], (1.0 / c_in as f64).sqrt(), rng);
    store.add(name, w, ParamKind::Trainable)
}

fn pointwise<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
    conv2d(
        x,
        w,
        None,
        Conv2dGeometry {
            stride: 1,
            padding: 0,
        },
    )
}

/// Learnable relative-position tables `r^q`, `r^k`, `r^v` for one axis.
#[derive(Clone, Debug)]
pub struct RelPosEmbedding {
    pub axis: Axis,
    /// Extent `L` of the attended axis; tables hold `2L − 1` offsets.
    pub span: usize,
    pub q_table: ParamId,
    pub k_table: ParamId,
    pub v_table: ParamId,
}

impl RelPosEmbedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        axis: Axis,
        cfg: &AxialAttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let offsets = 2 * cfg.axis_len - 1;
        let shape = |depth: usize| {
            if cfg.per_head_embeddings {
                vec![cfg.heads, depth, offsets]
            } else {
                vec![depth, offsets]
            }
        };
        let depth = cfg.depth();
        let mut table = |suffix: &str| {
            store.add(
                format!("{prefix}.{suffix}"),
                Tensor::randn(shape(depth), 0.1, rng),
                ParamKind::Trainable,
            )
        };
        Ok(Self {
            axis,
            span: cfg.axis_len,
            q_table: table("rq")?,
            k_table: table("rk")?,
            v_table: table("rv")?,
        })
    }

    pub fn bind<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>) -> EmbeddingTables<'t, T> {
        EmbeddingTables {
            q: ctx.param(self.q_table),
            k: ctx.param(self.k_table),
            v: ctx.param(self.v_table),
        }
    }
}

/// Projections, position-sensitive attention along one axis, and a 1×1 output projection.
#[derive(Clone, Debug)]
pub struct AxialAttentionLayer {
    pub axis: Axis,
    pub cfg: AxialAttentionConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub embedding: Option<RelPosEmbedding>,
}

impl AxialAttentionLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        axis: Axis,
        cfg: AxialAttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            axis,
            cfg,
            wq: projection(store, format!("{prefix}.wq"), cfg.c_in, cfg.c_mid, rng)?,
            wk: projection(store, format!("{prefix}.wk"), cfg.c_in, cfg.c_mid, rng)?,
            wv: projection(store, format!("{prefix}.wv"), cfg.c_in, cfg.c_mid, rng)?,
            wo: projection(store, format!("{prefix}.wo"), cfg.c_mid, cfg.c_out, rng)?,
            embedding: if cfg.positional {
                Some(RelPosEmbedding::new(store, prefix, axis, &cfg, rng)?)
            } else {
                None
            },
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let extent = match self.axis {
            Axis::Height => shape.get(2),
            Axis::Width => shape.get(3),
        };
        if extent != Some(&self.cfg.axis_len) {
            return Err(Error::dim(
                "axial_attention",
                format!(
                    "{} axis of {shape:?} does not match embedding span {}",
                    self.axis.name(),
                    self.cfg.axis_len
                ),
            ));
        }
        let (q, k, v) = qkv_project(
            x,
            ctx.param(self.wq),
            ctx.param(self.wk),
            ctx.param(self.wv),
        )?;
        let tables = self.embedding.as_ref().map(|e| e.bind(ctx));
        let y = axial_position_sensitive_attention(q, k, v, tables, self.axis, self.cfg.options())?;
        pointwise(y, ctx.param(self.wo))
    }
}

/// Height-axis attention followed by width-axis attention, optionally residual.
#[derive(Clone, Debug)]
pub struct AxialBlock {
    pub height: AxialAttentionLayer,
    pub width: AxialAttentionLayer,
    pub residual: bool,
}

impl AxialBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg_h: AxialAttentionConfig,
        cfg_w: AxialAttentionConfig,
        residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg_w.c_in != cfg_h.c_out {
            return Err(Error::Config(format!(
                "height layer emits {} channels but width layer expects {}",
                cfg_h.c_out, cfg_w.c_in
            )));
        }
        if residual && cfg_h.c_in != cfg_w.c_out {
            return Err(Error::Config(format!(
                "residual connection needs c_in == c_out, got {} and {}",
                cfg_h.c_in, cfg_w.c_out
            )));
        }
        Ok(Self {
            height: AxialAttentionLayer::new(
                store,
                &format!("{prefix}.height"),
                Axis::Height,
                cfg_h,
                rng,
            )?,
            width: AxialAttentionLayer::new(
                store,
                &format!("{prefix}.width"),
                Axis::Width,
                cfg_w,
                rng,
            )?,
            residual,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let y = self.width.forward(ctx, self.height.forward(ctx, x)?)?;
        if self.residual {
            y.add(x)
        } else {
            Ok(y)
        }
    }
}

/// Residual full 2-D self-attention without positional terms.
#[derive(Clone, Debug)]
pub struct NonLocalBlock {
    pub opts: AttentionOptions,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl NonLocalBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        c_mid: usize,
        opts: AttentionOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if opts.heads == 0 || !c_mid.is_multiple_of(opts.heads) {
            return Err(Error::Config(format!(
                "c_mid {c_mid} is not divisible by {} heads",
                opts.heads
            )));
        }
        Ok(Self {
            opts,
            wq: projection(store, format!("{prefix}.wq"), channels, c_mid, rng)?,
            wk: projection(store, format!("{prefix}.wk"), channels, c_mid, rng)?,
            wv: projection(store, format!("{prefix}.wv"), channels, c_mid, rng)?,
            wo: projection(store, format!("{prefix}.wo"), c_mid, channels, rng)?,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (q, k, v) = qkv_project(
            x,
            ctx.param(self.wq),
            ctx.param(self.wk),
            ctx.param(self.wv),
        )?;
        let y = nonlocal_attention(q, k, v, self.opts)?;
        pointwise(y, ctx.param(self.wo))?.add(x)
    }
}
