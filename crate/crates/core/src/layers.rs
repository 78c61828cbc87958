//! Parameterized building blocks shared by the attention and network modules.

use rand::Rng;

use crate::autodiff::nn::{conv2d, Conv2dGeometry};
use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: Conv2dGeometry,
}

impl Conv2d {
    /// Registers `<prefix>.w` (and `<prefix>.b`) with He-uniform initialization.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (6.0 / (c_in * kernel * kernel) as f64).sqrt();
        let w = Tensor::uniform([c_out, c_in, kernel, kernel], -bound, bound, rng);
        let weight = store.add(format!("{prefix}.w"), w, ParamKind::Trainable)?;
        let bias = if bias {
            Some(store.add(
                format!("{prefix}.b"),
                Tensor::zeros([c_out]),
                ParamKind::Trainable,
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            geom: Conv2dGeometry::same(kernel),
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        conv2d(
            x,
            ctx.param(self.weight),
            self.bias.map(|b| ctx.param(b)),
            self.geom,
        )
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            gamma: store.add(
                format!("{prefix}.gamma"),
                Tensor::ones([channels]),
                ParamKind::Trainable,
            )?,
            beta: store.add(
                format!("{prefix}.beta"),
                Tensor::zeros([channels]),
                ParamKind::Trainable,
            )?,
            running_mean: store.add(
                format!("{prefix}.running_mean"),
                Tensor::zeros([channels]),
                ParamKind::Buffer,
            )?,
            running_var: store.add(
                format!("{prefix}.running_var"),
                Tensor::ones([channels]),
                ParamKind::Buffer,
            )?,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        ctx.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
        )
    }
}

/// 3×3 convolution, batch normalization, ReLU.
#[derive(Clone, Debug)]
pub struct Cbr {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Cbr {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{prefix}.conv"), c_in, c_out, 3, true, rng)?,
            bn: BatchNorm2d::new(store, &format!("{prefix}.bn"), c_out)?,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let y = self.conv.forward(ctx, x)?;
        Ok(self.bn.forward(ctx, y)?.relu())
    }
}
