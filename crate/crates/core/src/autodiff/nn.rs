//! Convolution, normalization, pooling and resampling on N×C×H×W tensors.

use std::borrow::Cow;

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::tape::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::dim(
            op,
            format!("expected an N×C×H×W tensor, got shape {shape:?}"),
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    /// Stride 1 with the padding that preserves spatial extents for a `kernel`-wide window.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: (kernel - 1) / 2,
        }
    }
}

struct ConvShape {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvShape {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<'a, T: Scalar>(&self, x: &'a [T]) -> Cow<'a, [T]> {
        if self.is_pointwise() {
            return Cow::Borrowed(x);
        }
        let (hw_out, mut cols) = (self.ho * self.wo, Vec::new());
        cols.resize(self.c_in * self.kh * self.kw * hw_out, T::zero());
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * hw_out;
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let x_ = (ox * self.stride + j) as isize - self.pad as isize;
                            if x_ < 0 || x_ >= self.w as isize {
                                continue;
                            }
                            cols[row + oy * self.wo + ox] =
                                x[(c * self.h + y as usize) * self.w + x_ as usize];
                        }
                    }
                }
            }
        }
        Cow::Owned(cols)
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        if self.is_pointwise() {
            for (d, &c) in dx.iter_mut().zip(cols) {
                *d += c;
            }
            return;
        }
        let hw_out = self.ho * self.wo;
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * hw_out;
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let x_ = (ox * self.stride + j) as isize - self.pad as isize;
                            if x_ < 0 || x_ >= self.w as isize {
                                continue;
                            }
                            dx[(c * self.h + y as usize) * self.w + x_ as usize] +=
                                cols[row + oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip), as is usual for learned filters.
///
/// `x` is N×C_in×H×W, `weight` is C_out×C_in×kh×kw and `bias` has C_out entries.
/// Output extent per spatial axis is `floor((H + 2p − k) / stride) + 1`.
pub fn conv2d<'t, T: Scalar>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    geom: Conv2dGeometry,
) -> Result<Var<'t, T>> {
    let (xv, wv) = (x.value(), weight.value());
    let [n, c_in, h, w] = dims4("conv2d", xv.shape())?;
    let [c_out, wc_in, kh, kw] = dims4("conv2d", wv.shape())?;
    if wc_in != c_in {
        return Err(Error::dim(
            "conv2d",
            format!(
                "input {:?} has {c_in} channels but weight {:?} expects {wc_in}",
                xv.shape(),
                wv.shape()
            ),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim(
            "conv2d",
            format!("kernel {kh}×{kw} must have odd extents"),
        ));
    }
    if geom.stride == 0 || h + 2 * geom.padding < kh || w + 2 * geom.padding < kw {
        return Err(Error::dim(
            "conv2d",
            format!("kernel {kh}×{kw} does not fit input {h}×{w}"),
        ));
    }
    let bv = match bias {
        Some(b) => {
            let bv = b.value();
            if bv.shape() != [c_out] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias shape {:?} for {c_out} output channels", bv.shape()),
                ));
            }
            Some(bv)
        }
        None => None,
    };
    let cs = ConvShape {
        c_in,
        h,
        w,
        kh,
        kw,
        ho: (h + 2 * geom.padding - kh) / geom.stride + 1,
        wo: (w + 2 * geom.padding - kw) / geom.stride + 1,
        stride: geom.stride,
        pad: geom.padding,
    };
    let (k, hw_out, in_len) = (c_in * kh * kw, cs.ho * cs.wo, c_in * h * w);
    let mut out = Vec::with_capacity(n * c_out * hw_out);
    for s in 0..n {
        let cols = cs.im2col(&xv.data()[s * in_len..(s + 1) * in_len]);
        let mut y = gemm(wv.data(), &cols, c_out, k, hw_out);
        if let Some(bv) = &bv {
            for (row, &b) in y.chunks_mut(hw_out).zip(bv.data()) {
                row.iter_mut().for_each(|v| *v += b);
            }
        }
        out.extend(y);
    }
    let value = Tensor::from_parts(vec![n, c_out, cs.ho, cs.wo], out);
    let mut parents = vec![x, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    let (x_shape, w_shape) = (xv.shape().to_vec(), wv.shape().to_vec());
    Ok(x.tape.record(
        value,
        &parents,
        Box::new(move |g| {
            let gd = g.data();
            let mut gx = vec![T::zero(); n * in_len];
            let mut gw = vec![T::zero(); c_out * k];
            let mut gb = vec![T::zero(); c_out];
            for s in 0..n {
                let gy = &gd[s * c_out * hw_out..(s + 1) * c_out * hw_out];
                let cols = cs.im2col(&xv.data()[s * in_len..(s + 1) * in_len]);
                for (acc, v) in gw.iter_mut().zip(gemm_nt(gy, &cols, c_out, hw_out, k)) {
                    *acc += v;
                }
                let dcols = gemm_tn(wv.data(), gy, c_out, k, hw_out);
                cs.col2im_add(&dcols, &mut gx[s * in_len..(s + 1) * in_len]);
                if has_bias {
                    for (b, row) in gb.iter_mut().zip(gy.chunks(hw_out)) {
                        *b += row.iter().copied().sum();
                    }
                }
            }
            let mut grads = vec![
                Tensor::from_parts(x_shape.clone(), gx),
                Tensor::from_parts(w_shape.clone(), gw),
            ];
            if has_bias {
                grads.push(Tensor::from_parts(vec![c_out], gb));
            }
            grads
        }),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch statistics observed in train mode, already blended into running stats.
#[derive(Clone, Debug)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Batch normalization over the N, H and W axes of an N×C×H×W tensor.
///
/// Train mode normalizes with the biased batch variance and returns updated running
/// statistics (momentum 0.1, unbiased variance). Eval mode normalizes with `running`.
pub fn batch_norm2d<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    running: &RunningStats<T>,
    mode: BnMode,
) -> Result<(Var<'t, T>, Option<RunningStats<T>>)> {
    let xv = x.value();
    let [n, c, h, w] = dims4("batch_norm2d", xv.shape())?;
    let (gv, bv) = (gamma.value(), beta.value());
    for (name, t) in [("gamma", &gv), ("beta", &bv)] {
        if t.shape() != [c] {
            return Err(Error::dim(
                "batch_norm2d",
                format!("{name} shape {:?} for {c} channels", t.shape()),
            ));
        }
    }
    for t in [&running.mean, &running.var] {
        if t.shape() != [c] {
            return Err(Error::dim(
                "batch_norm2d",
                format!("running stat shape {:?} for {c} channels", t.shape()),
            ));
        }
    }
    let (hw, m) = (h * w, n * h * w);
    if mode == BnMode::Train && m == 1 {
        return Err(Error::DegenerateVariance);
    }
    let eps = T::of(BN_EPS);
    let xd = xv.data();
    let at = move |s: usize, ch: usize| (s * c + ch) * hw;
    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        BnMode::Train => (0..c)
            .map(|ch| {
                let mut sum = T::zero();
                for s in 0..n {
                    sum += xd[at(s, ch)..at(s, ch) + hw].iter().copied().sum();
                }
                let mean = sum / T::of(m as f64);
                let mut sq = T::zero();
                for s in 0..n {
                    for &v in &xd[at(s, ch)..at(s, ch) + hw] {
                        sq += (v - mean) * (v - mean);
                    }
                }
                (mean, sq / T::of(m as f64))
            })
            .unzip(),
        BnMode::Eval => (running.mean.data().to_vec(), running.var.data().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    for s in 0..n {
        for ch in 0..c {
            let (g, b) = (gv.data()[ch], bv.data()[ch]);
            for i in at(s, ch)..at(s, ch) + hw {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                y[i] = g * xhat[i] + b;
            }
        }
    }
    let updated = (mode == BnMode::Train).then(|| {
        let mom = T::of(BN_MOMENTUM);
        let unbias = T::of(m as f64 / (m - 1) as f64);
        let blend = |old: &Tensor<T>, new: &[T], scale: T| {
            Tensor::from_parts(
                vec![c],
                old.data()
                    .iter()
                    .zip(new)
                    .map(|(&o, &v)| (T::one() - mom) * o + mom * v * scale)
                    .collect(),
            )
        };
        RunningStats {
            mean: blend(&running.mean, &mean, T::one()),
            var: blend(&running.var, &var, unbias),
        }
    });
    let shape = xv.shape().to_vec();
    let value = Tensor::from_parts(shape.clone(), y);
    let out = x.tape.record(
        value,
        &[x, gamma, beta],
        Box::new(move |g| {
            let gd = g.data();
            let mut gx = vec![T::zero(); gd.len()];
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for ch in 0..c {
                let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
                for s in 0..n {
                    for i in at(s, ch)..at(s, ch) + hw {
                        sum_g += gd[i];
                        sum_gx += gd[i] * xhat[i];
                    }
                }
                ggamma[ch] = sum_gx;
                gbeta[ch] = sum_g;
                let scale = gv.data()[ch] * inv_std[ch];
                match mode {
                    BnMode::Train => {
                        let mf = T::of(m as f64);
                        for s in 0..n {
                            for i in at(s, ch)..at(s, ch) + hw {
                                gx[i] = scale * (gd[i] - sum_g / mf - xhat[i] * sum_gx / mf);
                            }
                        }
                    }
                    BnMode::Eval => {
                        for s in 0..n {
                            for i in at(s, ch)..at(s, ch) + hw {
                                gx[i] = scale * gd[i];
                            }
                        }
                    }
                }
            }
            vec![
                Tensor::from_parts(shape.clone(), gx),
                Tensor::from_parts(vec![c], ggamma),
                Tensor::from_parts(vec![c], gbeta),
            ]
        }),
    );
    Ok((out, updated))
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn max_pool2x2<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let [n, c, h, w] = dims4("max_pool2x2", xv.shape())?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::dim(
            "max_pool2x2",
            format!("spatial extent {h}×{w} too small to pool"),
        ));
    }
    let xd = xv.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] || xd[i].is_nan() {
                        best = i;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    let in_shape = xv.shape().to_vec();
    Ok(x.tape.record(
        Tensor::from_parts(vec![n, c, ho, wo], out),
        &[x],
        Box::new(move |g| {
            let mut gx = Tensor::zeros(in_shape.clone());
            let gxd = gx.data_mut();
            for (&i, &v) in argmax.iter().zip(g.data()) {
                gxd[i] += v;
            }
            vec![gx]
        }),
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Upsample {
    #[default]
    Nearest,
    /// Half-pixel-centred bilinear interpolation with edge clamping.
    Bilinear,
}

/// Doubles both spatial extents.
pub fn upsample2x<'t, T: Scalar>(x: Var<'t, T>, mode: Upsample) -> Result<Var<'t, T>> {
    let xv = x.value();
    let [n, c, h, w] = dims4("upsample2x", xv.shape())?;
    let (ho, wo) = (2 * h, 2 * w);
    // each output pixel is a weighted sum of up to four input pixels (plane-relative offsets)
    let taps: Vec<[(usize, f64); 4]> = (0..ho * wo)
        .map(|o| {
            let (oy, ox) = (o / wo, o % wo);
            match mode {
                Upsample::Nearest => [((oy / 2) * w + ox / 2, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)],
                Upsample::Bilinear => {
                    let src = |d: usize, len: usize| {
                        let s = ((d as f64 + 0.5) / 2.0 - 0.5).max(0.0);
                        let lo = (s.floor() as usize).min(len - 1);
                        let hi = (lo + 1).min(len - 1);
                        (lo, hi, s - lo as f64)
                    };
                    let (y0, y1, fy) = src(oy, h);
                    let (x0, x1, fx) = src(ox, w);
                    [
                        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                        (y0 * w + x1, (1.0 - fy) * fx),
                        (y1 * w + x0, fy * (1.0 - fx)),
                        (y1 * w + x1, fy * fx),
                    ]
                }
            }
        })
        .collect();
    let xd = xv.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for plane in 0..n * c {
        let (src, dst) = (
            &xd[plane * h * w..(plane + 1) * h * w],
            &mut out[plane * ho * wo..(plane + 1) * ho * wo],
        );
        for (d, tap) in dst.iter_mut().zip(&taps) {
            *d = tap
                .iter()
                .filter(|t| t.1 != 0.0)
                .map(|&(i, wt)| src[i] * T::of(wt))
                .sum();
        }
    }
    let in_shape = xv.shape().to_vec();
    Ok(x.tape.record(
        Tensor::from_parts(vec![n, c, ho, wo], out),
        &[x],
        Box::new(move |g| {
            let mut gx = Tensor::zeros(in_shape.clone());
            let gxd = gx.data_mut();
            let gd = g.data();
            for plane in 0..n * c {
                let dst = &mut gxd[plane * h * w..(plane + 1) * h * w];
                for (&gv, tap) in gd[plane * ho * wo..(plane + 1) * ho * wo].iter().zip(&taps) {
                    for &(i, wt) in tap.iter().filter(|t| t.1 != 0.0) {
                        dst[i] += gv * T::of(wt);
                    }
                }
            }
            vec![gx]
        }),
    ))
}
