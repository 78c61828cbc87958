//! Elementwise, reduction, matrix and shape operations on [`Var`].

use std::rc::Rc;

use super::kernels::{bmm_kernel, gemm, gemm_nt, gemm_tn, Layout};
use super::tape::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides, Tensor};

fn check_same_tape<T>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{op}: operands recorded on different tapes"
        )))
    }
}

fn check_same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::dim(op, format!("shapes {a:?} and {b:?} differ")))
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// Tape methods take `self` by value like the operator traits but return graph nodes.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Var<'t, T> {
    fn unary(self, value: Tensor<T>, bw: impl Fn(&Tensor<T>) -> Tensor<T> + 'static) -> Self {
        self.tape
            .record(value, &[self], Box::new(move |g| vec![bw(g)]))
    }

    fn binary(
        self,
        op: &'static str,
        rhs: Self,
        f: impl Fn(T, T) -> T,
        bw: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> (Tensor<T>, Tensor<T>) + 'static,
    ) -> Result<Self> {
        check_same_tape(op, &self, &rhs)?;
        let (a, b) = (self.value(), rhs.value());
        check_same_shape(op, a.shape(), b.shape())?;
        let out = zip_map(&a, &b, f);
        Ok(self.tape.record(
            out,
            &[self, rhs],
            Box::new(move |g| {
                let (ga, gb) = bw(g, &a, &b);
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(self, rhs: Self) -> Result<Self> {
        self.binary("add", rhs, |x, y| x + y, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(self, rhs: Self) -> Result<Self> {
        self.binary(
            "sub",
            rhs,
            |x, y| x - y,
            |g, _, _| (g.clone(), g.map(|v| -v)),
        )
    }

    pub fn mul(self, rhs: Self) -> Result<Self> {
        self.binary(
            "mul",
            rhs,
            |x, y| x * y,
            |g, a, b| (zip_map(g, b, |g, b| g * b), zip_map(g, a, |g, a| g * a)),
        )
    }

    pub fn div(self, rhs: Self) -> Result<Self> {
        self.binary(
            "div",
            rhs,
            |x, y| x / y,
            |g, a, b| {
                let ga = zip_map(g, b, |g, b| g / b);
                let mut gb = zip_map(g, a, |g, a| g * a);
                for (v, &bv) in gb.data_mut().iter_mut().zip(b.data()) {
                    *v = -*v / (bv * bv);
                }
                (ga, gb)
            },
        )
    }

    pub fn scale(self, c: f64) -> Self {
        let c = T::of(c);
        let out = self.value().map(|x| x * c);
        self.unary(out, move |g| g.map(|v| v * c))
    }

    pub fn add_scalar(self, c: f64) -> Self {
        let c = T::of(c);
        let out = self.value().map(|x| x + c);
        self.unary(out, |g| g.clone())
    }

    pub fn neg(self) -> Self {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Self {
        let x = self.value();
        // NaN passes through so divergence stays visible
        let out = x.map(|v| if v < T::zero() { T::zero() } else { v });
        self.unary(out, move |g| {
            zip_map(g, &x, |g, x| if x > T::zero() { g } else { T::zero() })
        })
    }

    pub fn sigmoid(self) -> Self {
        let out = self.value().map(|v| {
            // split on sign so exp never overflows
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let y = Rc::new(out.clone());
        self.unary(out, move |g| zip_map(g, &y, |g, y| g * y * (T::one() - y)))
    }

    pub fn exp(self) -> Self {
        let out = self.value().map(T::exp);
        let y = Rc::new(out.clone());
        self.unary(out, move |g| zip_map(g, &y, |g, y| g * y))
    }

    pub fn ln(self) -> Self {
        let x = self.value();
        let out = x.map(T::ln);
        self.unary(out, move |g| zip_map(g, &x, |g, x| g / x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Self {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let x = self.value();
        let out = x.map(|v| v.max(lo).min(hi));
        self.unary(out, move |g| {
            zip_map(g, &x, |g, x| if x < lo || x > hi { T::zero() } else { g })
        })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| {
            Tensor::full(shape.clone(), g.item())
        })
    }

    pub fn mean(self) -> Self {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Matrix product of `[m×k]` and `[k×n]` operands.
    pub fn matmul(self, rhs: Self) -> Result<Self> {
        check_same_tape("matmul", &self, &rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = Tensor::from_parts(vec![m, n], gemm(a.data(), b.data(), m, k, n));
        Ok(self.tape.record(
            out,
            &[self, rhs],
            Box::new(move |g| {
                let ga = gemm_nt(g.data(), b.data(), m, n, k);
                let gb = gemm_tn(a.data(), g.data(), m, k, n);
                vec![
                    Tensor::from_parts(vec![m, k], ga),
                    Tensor::from_parts(vec![k, n], gb),
                ]
            }),
        ))
    }

    /// Batched matrix product of `[B×m×k]` and `[B×k×n]` operands.
    pub fn bmm(self, rhs: Self) -> Result<Self> {
        check_same_tape("bmm", &self, &rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim(
                "bmm",
                format!("cannot batch-multiply {sa:?} by {sb:?}"),
            ));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let out = bmm_kernel(a.data(), b.data(), batch, (m, k, n), Layout::NN);
        Ok(self.tape.record(
            Tensor::from_parts(vec![batch, m, n], out),
            &[self, rhs],
            Box::new(move |g| {
                let ga = bmm_kernel(g.data(), b.data(), batch, (m, k, n), Layout::NT);
                let gb = bmm_kernel(a.data(), g.data(), batch, (m, k, n), Layout::TN);
                vec![
                    Tensor::from_parts(vec![batch, m, k], ga),
                    Tensor::from_parts(vec![batch, k, n], gb),
                ]
            }),
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Self> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut y = vec![T::zero(); x.numel()];
        let xd = x.data();
        if inner == 1 {
            for (xs, ys) in xd.chunks_exact(len).zip(y.chunks_exact_mut(len)) {
                let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for (yv, &xv) in ys.iter_mut().zip(xs) {
                    *yv = (xv - max).exp();
                    total += *yv;
                }
                let inv = T::one() / total;
                for yv in ys.iter_mut() {
                    *yv *= inv;
                }
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let max = (0..len).map(|a| xd[at(a)]).fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for a in 0..len {
                        let e = (xd[at(a)] - max).exp();
                        y[at(a)] = e;
                        total += e;
                    }
                    for a in 0..len {
                        y[at(a)] /= total;
                    }
                }
            }
        }
        let out = Tensor::from_parts(shape.clone(), y);
        let y = Rc::new(out.clone());
        Ok(self.unary(out, move |g| {
            let (gd, yd) = (g.data(), y.data());
            let mut gx = vec![T::zero(); gd.len()];
            if inner == 1 {
                for ((gs, ys), out) in gd
                    .chunks_exact(len)
                    .zip(yd.chunks_exact(len))
                    .zip(gx.chunks_exact_mut(len))
                {
                    let dot: T = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(gs).zip(ys) {
                        *o = yv * (gv - dot);
                    }
                }
                return Tensor::from_parts(shape.clone(), gx);
            }
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let dot: T = (0..len).map(|a| gd[at(a)] * yd[at(a)]).sum();
                    for a in 0..len {
                        gx[at(a)] = yd[at(a)] * (gd[at(a)] - dot);
                    }
                }
            }
            Tensor::from_parts(shape.clone(), gx)
        }))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        Ok(self.unary(out, move |g| {
            Tensor::from_parts(old.clone(), g.data().to_vec())
        }))
    }

    /// Gathers `out[i] = self.flat[indices[i]]`; repeated indices accumulate in the backward pass.
    pub fn take(self, indices: Rc<Vec<usize>>, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let x = self.value();
        let shape = shape.into();
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::dim(
                "take",
                format!("{} indices for shape {shape:?}", indices.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::dim(
                "take",
                format!("index {bad} out of range for {} elements", x.numel()),
            ));
        }
        let xd = x.data();
        let data = indices.iter().map(|&i| xd[i]).collect();
        let in_shape = x.shape().to_vec();
        Ok(self.unary(Tensor::from_parts(shape, data), move |g| {
            let mut gx = Tensor::zeros(in_shape.clone());
            let gxd = gx.data_mut();
            for (&i, &v) in indices.iter().zip(g.data()) {
                gxd[i] += v;
            }
            gx
        }))
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Self> {
        let shape = self.shape();
        let (indices, out_shape) = permute_indices(&shape, axes)?;
        self.take(Rc::new(indices), out_shape)
    }
}

/// Flat source index for every element of the permuted tensor, plus the permuted shape.
pub(crate) fn permute_indices(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len()
        || axes
            .iter()
            .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::dim(
            "permute",
            format!("{axes:?} is not a permutation of the axes of {shape:?}"),
        ));
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut indices = Vec::with_capacity(numel);
    let mut counter = vec![0usize; shape.len()];
    let mut src = 0usize;
    for _ in 0..numel {
        indices.push(src);
        for d in (0..counter.len()).rev() {
            counter[d] += 1;
            src += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    Ok((indices, out_shape))
}

/// Concatenates tensors along `axis`; all other extents must agree.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let values: Vec<Rc<Tensor<T>>> = parts.iter().map(Var::value).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::dim(
            "concat",
            format!("axis {axis} out of range for shape {base:?}"),
        ));
    }
    for (p, v) in parts.iter().zip(&values) {
        check_same_tape("concat", first, p)?;
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::dim(
                "concat",
                format!("shape {s:?} incompatible with {base:?} along axis {axis}"),
            ));
        }
    }
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let (outer, _, inner) = axis_split(&base, axis);
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &len) in values.iter().zip(&lens) {
            data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(first.tape.record(
        Tensor::from_parts(out_shape, data),
        parts,
        Box::new(move |g| {
            let gd = g.data();
            let mut grads: Vec<Vec<T>> = lens
                .iter()
                .map(|&l| Vec::with_capacity(outer * l * inner))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (buf, &len) in grads.iter_mut().zip(&lens) {
                    buf.extend_from_slice(&gd[offset..offset + len * inner]);
                    offset += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(d, s)| Tensor::from_parts(s.clone(), d))
                .collect()
        }),
    ))
}
