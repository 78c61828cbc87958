use rayon::prelude::*;

use super::{AttentionOptions, Axis};
use crate::autodiff::kernels::{count, plain, product, trans, transpose};
use crate::autodiff::nn::{conv2d, Conv2dGeometry};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative-position tables for one axis, each `depth × (2L−1)` or, per head,
/// `heads × depth × (2L−1)`. Column `offset + L − 1` holds the entry for `key − query = offset`.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTables<'t, T> {
    pub q: Var<'t, T>,
    pub k: Var<'t, T>,
    pub v: Var<'t, T>,
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::dim(
            op,
            format!("expected an N×C×H×W tensor, got shape {shape:?}"),
        )),
    }
}

/// `q = W_Q x`, `k = W_K x`, `v = W_V x` as 1×1 convolutions with weights `C_mid × C_in × 1 × 1`.
pub fn qkv_project<'t, T: Scalar>(
    x: Var<'t, T>,
    wq: Var<'t, T>,
    wk: Var<'t, T>,
    wv: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
    let [_, c_in, _, _] = dims4("qkv_project", &x.shape())?;
    for w in [wq, wk, wv] {
        let s = w.shape();
        if s.len() != 4 || s[1] != c_in || s[2] != 1 || s[3] != 1 {
            return Err(Error::dim(
                "qkv_project",
                format!("projection {s:?} does not map {c_in} input channels"),
            ));
        }
    }
    let geom = Conv2dGeometry {
        stride: 1,
        padding: 0,
    };
    Ok((
        conv2d(x, wq, None, geom)?,
        conv2d(x, wk, None, geom)?,
        conv2d(x, wv, None, geom)?,
    ))
}

#[derive(Clone, Copy, Debug)]
struct Heads {
    n: usize,
    heads: usize,
    depth: usize,
    v_depth: usize,
    h: usize,
    w: usize,
}

impl Heads {
    fn groups(&self) -> usize {
        self.n * self.heads
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

fn split_heads<T: Scalar>(
    q: &Var<'_, T>,
    k: &Var<'_, T>,
    v: &Var<'_, T>,
    heads: usize,
) -> Result<Heads> {
    let [n, c, h, w] = dims4("attention", &q.shape())?;
    let ks = k.shape();
    let [vn, vc, vh, vw] = dims4("attention", &v.shape())?;
    if ks != q.shape() || (vn, vh, vw) != (n, h, w) {
        return Err(Error::dim(
            "attention",
            format!(
                "q {:?}, k {ks:?} and v {:?} are not compatible",
                q.shape(),
                v.shape()
            ),
        ));
    }
    if heads == 0 || c % heads != 0 || vc % heads != 0 {
        return Err(Error::dim(
            "attention",
            format!("{c} query / {vc} value channels do not split into {heads} heads"),
        ));
    }
    Ok(Heads {
        n,
        heads,
        depth: c / heads,
        v_depth: vc / heads,
        h,
        w,
    })
}

fn logit_scale(depth: usize, opts: AttentionOptions) -> f64 {
    if opts.scale_logits {
        1.0 / (depth as f64).sqrt()
    } else {
        1.0
    }
}

fn softmax_rows<T: Scalar>(x: &mut [T], len: usize) {
    for row in x.chunks_exact_mut(len) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = T::one() / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Turns `gA` into the logit gradient `scale · A ⊙ (gA − rowsum(gA ⊙ A))`, in place.
fn softmax_backward_rows<T: Scalar>(ga: &mut [T], a: &[T], len: usize, scale: T) {
    for (g, p) in ga.chunks_exact_mut(len).zip(a.chunks_exact(len)) {
        let dot: T = g.iter().zip(p).map(|(&x, &y)| x * y).sum();
        for (gv, &pv) in g.iter_mut().zip(p) {
            *gv = scale * pv * (*gv - dot);
        }
    }
}

/// Softmax weights `P×P` of one (image, head) group; `q`, `k` are `d×P` slices.
fn nonlocal_weights<T: Scalar>(q: &[T], k: &[T], d: usize, p: usize, scale: T) -> Vec<T> {
    let mut a = vec![T::zero(); p * p];
    product(trans(q), plain(k), (p, d, p), &mut a);
    for v in a.iter_mut() {
        *v *= scale;
    }
    softmax_rows(&mut a, p);
    a
}

/// Full 2-D self-attention: each position attends to every position of its image.
///
/// The softmax weights are recomputed during the backward pass instead of being kept alive
/// on the tape, which bounds memory at one `HW×HW` matrix per worker.
pub fn nonlocal_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    opts: AttentionOptions,
) -> Result<Var<'t, T>> {
    let g = split_heads(&q, &k, &v, opts.heads)?;
    let (d, dv, p) = (g.depth, g.v_depth, g.plane());
    let scale = T::of(logit_scale(d, opts));
    let (qt, kt, vt) = (q.value(), k.value(), v.value());
    count(g.groups() * p * p * (d + dv));
    let mut y = vec![T::zero(); g.groups() * dv * p];
    let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
    y.par_chunks_mut(dv * p).enumerate().for_each(|(b, out)| {
        let (qs, ks) = (
            &qd[b * d * p..(b + 1) * d * p],
            &kd[b * d * p..(b + 1) * d * p],
        );
        let vs = &vd[b * dv * p..(b + 1) * dv * p];
        let a = nonlocal_weights(qs, ks, d, p, scale);
        let mut yt = vec![T::zero(); p * dv];
        product(plain(&a), trans(vs), (p, p, dv), &mut yt);
        out.copy_from_slice(&transpose(&yt, p, dv));
    });
    let out = Tensor::from_parts(vec![g.n, g.heads * dv, g.h, g.w], y);
    Ok(q.tape().record(
        out,
        &[q, k, v],
        Box::new(move |gy| {
            let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
            let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..g.groups())
                .into_par_iter()
                .map(|b| {
                    let (qs, ks) = (
                        &qd[b * d * p..(b + 1) * d * p],
                        &kd[b * d * p..(b + 1) * d * p],
                    );
                    let vs = &vd[b * dv * p..(b + 1) * dv * p];
                    let gys = &gy.data()[b * dv * p..(b + 1) * dv * p];
                    let a = nonlocal_weights(qs, ks, d, p, scale);
                    let mut ga = vec![T::zero(); p * p];
                    product(trans(gys), plain(vs), (p, dv, p), &mut ga);
                    let mut gv = vec![T::zero(); dv * p];
                    product(plain(gys), plain(&a), (dv, p, p), &mut gv);
                    softmax_backward_rows(&mut ga, &a, p, scale);
                    let mut gq_t = vec![T::zero(); p * d];
                    product(plain(&ga), trans(ks), (p, p, d), &mut gq_t);
                    let mut gk = vec![T::zero(); d * p];
                    product(plain(qs), plain(&ga), (d, p, p), &mut gk);
                    (transpose(&gq_t, p, d), gk, gv)
                })
                .collect();
            let (mut gq, mut gk, mut gv) = (Vec::new(), Vec::new(), Vec::new());
            for (a, b, c) in parts {
                gq.extend(a);
                gk.extend(b);
                gv.extend(c);
            }
            vec![
                Tensor::from_parts(qt.shape().to_vec(), gq),
                Tensor::from_parts(kt.shape().to_vec(), gk),
                Tensor::from_parts(vt.shape().to_vec(), gv),
            ]
        }),
    ))
}

fn check_table<T: Scalar>(t: &Var<'_, T>, heads: usize, depth: usize, len: usize) -> Result<bool> {
    let s = t.shape();
    let span = 2 * len - 1;
    if s == [depth, span] {
        Ok(false)
    } else if s == [heads, depth, span] {
        Ok(true)
    } else {
        Err(Error::dim(
            "axial_attention",
            format!("embedding table {s:?} does not cover depth {depth} over an axis of length {len} (span {span})"),
        ))
    }
}

/// Geometry of one axial call: lines of length `len` along the attended axis.
#[derive(Clone, Copy, Debug)]
struct AxialGeometry {
    g: Heads,
    axis: Axis,
    len: usize,
    /// Number of lines per channel plane (the extent of the other axis).
    other: usize,
    span: usize,
}

impl AxialGeometry {
    fn new(g: Heads, axis: Axis) -> Self {
        let (len, other) = match axis {
            Axis::Height => (g.h, g.w),
            Axis::Width => (g.w, g.h),
        };
        Self {
            g,
            axis,
            len,
            other,
            span: 2 * len - 1,
        }
    }

    /// Offset within a channel plane of position `t` on line `o`, and the stride along the line.
    fn line(&self, o: usize) -> (usize, usize) {
        match self.axis {
            Axis::Width => (o * self.g.w, 1),
            Axis::Height => (o, self.g.w),
        }
    }
}

/// Relative tables of one head, each `depth × span` (channel-major, offsets contiguous).
struct HeadTables<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
}

fn head_tables<T: Scalar>(
    tables: &TableSet<T>,
    per_head: bool,
    head: usize,
    geo: &AxialGeometry,
) -> HeadTables<T> {
    let (d, dv, span) = (geo.g.depth, geo.g.v_depth, geo.span);
    let slice = |t: &Tensor<T>, depth: usize| {
        let h = if per_head { head } else { 0 };
        t.data()[h * depth * span..(h + 1) * depth * span].to_vec()
    };
    HeadTables {
        q: slice(&tables.0, d),
        k: slice(&tables.1, d),
        v: slice(&tables.2, dv),
    }
}

/// Gathers one line of `depth` channels into a channel-major `depth × len` buffer.
fn gather_line<T: Scalar>(
    src: &[T],
    base: usize,
    depth: usize,
    plane: usize,
    geo: &AxialGeometry,
    o: usize,
) -> Vec<T> {
    let (start, stride) = geo.line(o);
    let len = geo.len;
    let mut out = Vec::with_capacity(len * depth);
    for c in 0..depth {
        let ch = &src[base + c * plane + start..];
        if stride == 1 {
            out.extend_from_slice(&ch[..len]);
        } else {
            out.extend((0..len).map(|t| ch[t * stride]));
        }
    }
    out
}

fn scatter_line<T: Scalar>(
    dst: &mut [T],
    line: &[T],
    depth: usize,
    plane: usize,
    geo: &AxialGeometry,
    o: usize,
) {
    let (start, stride) = geo.line(o);
    let len = geo.len;
    for c in 0..depth {
        let ch = &mut dst[c * plane + start..];
        for (t, &v) in line[c * len..(c + 1) * len].iter().enumerate() {
            ch[t * stride] = v;
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Softmax weights `len × len` of one line from channel-major `q`, `k`.
///
/// For query `j`, key `w` reads table column `w + L − 1 − j`, so each query row touches the
/// contiguous table window starting at `L − 1 − j`.
fn line_weights<T: Scalar>(
    ql: &[T],
    kl: &[T],
    tabs: Option<&HeadTables<T>>,
    len: usize,
    d: usize,
    scale: T,
) -> Vec<T> {
    let span = 2 * len - 1;
    let mut a = vec![T::zero(); len * len];
    for (j, row) in a.chunks_exact_mut(len).enumerate() {
        let off = len - 1 - j;
        for c in 0..d {
            let qjc = ql[c * len + j];
            let kc = &kl[c * len..(c + 1) * len];
            match tabs {
                Some(t) => {
                    let rq = &t.q[c * span + off..c * span + off + len];
                    let rk = &t.k[c * span + off..c * span + off + len];
                    for w in 0..len {
                        row[w] += qjc * (kc[w] + rq[w]) + kc[w] * rk[w];
                    }
                }
                None => {
                    for w in 0..len {
                        row[w] += qjc * kc[w];
                    }
                }
            }
        }
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    softmax_rows(&mut a, len);
    a
}

type TableSet<T> = (Tensor<T>, Tensor<T>, Tensor<T>);

/// Operands of an axial call, kept alive for the backward pass.
struct AxialInputs<T> {
    q: std::rc::Rc<Tensor<T>>,
    k: std::rc::Rc<Tensor<T>>,
    v: std::rc::Rc<Tensor<T>>,
    tables: Option<(TableSet<T>, bool)>,
    geo: AxialGeometry,
    scale: T,
}

impl<T: Scalar> AxialInputs<T> {
    fn view(&self) -> AxialView<'_, T> {
        AxialView {
            q: &self.q,
            k: &self.k,
            v: &self.v,
            tables: self.tables.as_ref().map(|(t, ph)| (t, *ph)),
            geo: self.geo,
            scale: self.scale,
        }
    }
}

/// Borrowed operands that can be shared across worker threads.
struct AxialView<'a, T> {
    q: &'a Tensor<T>,
    k: &'a Tensor<T>,
    v: &'a Tensor<T>,
    tables: Option<(&'a TableSet<T>, bool)>,
    geo: AxialGeometry,
    scale: T,
}

/// Gradients of one (image, head) group.
struct GroupGrads<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    tables: Option<HeadTables<T>>,
}

impl<T: Scalar> AxialView<'_, T> {
    fn tables_for(&self, head: usize) -> Option<HeadTables<T>> {
        self.tables
            .map(|(t, per_head)| head_tables(t, per_head, head, &self.geo))
    }

    /// Channel offsets of group `b` (image `b / heads`, head `b % heads`) for q/k and v.
    fn bases(&self, b: usize) -> (usize, usize) {
        let g = &self.geo.g;
        (b * g.depth * g.plane(), b * g.v_depth * g.plane())
    }

    /// Forward pass of one group; returns the `dv × H × W` output and the weights of every line.
    fn forward_group(&self, b: usize, keep_weights: bool) -> (Vec<T>, Vec<T>) {
        let geo = &self.geo;
        let (d, dv, p, len, span) = (geo.g.depth, geo.g.v_depth, geo.g.plane(), geo.len, geo.span);
        let tabs = self.tables_for(b % geo.g.heads);
        let (qb, vb) = self.bases(b);
        let mut out = vec![T::zero(); dv * p];
        let mut weights = Vec::new();
        for o in 0..geo.other {
            let ql = gather_line(self.q.data(), qb, d, p, geo, o);
            let kl = gather_line(self.k.data(), qb, d, p, geo, o);
            let vl = gather_line(self.v.data(), vb, dv, p, geo, o);
            let a = line_weights(&ql, &kl, tabs.as_ref(), len, d, self.scale);
            let mut yl = vec![T::zero(); dv * len];
            for (j, aj) in a.chunks_exact(len).enumerate() {
                let off = len - 1 - j;
                for c in 0..dv {
                    let mut y = dot(aj, &vl[c * len..(c + 1) * len]);
                    if let Some(t) = &tabs {
                        y += dot(aj, &t.v[c * span + off..c * span + off + len]);
                    }
                    yl[c * len + j] = y;
                }
            }
            scatter_line(&mut out, &yl, dv, p, geo, o);
            if keep_weights {
                weights.extend(a);
            }
        }
        (out, weights)
    }

    fn backward_group(&self, b: usize, gy: &[T]) -> GroupGrads<T> {
        let geo = &self.geo;
        let (d, dv, p, len, span) = (geo.g.depth, geo.g.v_depth, geo.g.plane(), geo.len, geo.span);
        let tabs = self.tables_for(b % geo.g.heads);
        let (qb, vb) = self.bases(b);
        let mut grads = GroupGrads {
            q: vec![T::zero(); d * p],
            k: vec![T::zero(); d * p],
            v: vec![T::zero(); dv * p],
            tables: tabs.as_ref().map(|_| HeadTables {
                q: vec![T::zero(); d * span],
                k: vec![T::zero(); d * span],
                v: vec![T::zero(); dv * span],
            }),
        };
        for o in 0..geo.other {
            let ql = gather_line(self.q.data(), qb, d, p, geo, o);
            let kl = gather_line(self.k.data(), qb, d, p, geo, o);
            let vl = gather_line(self.v.data(), vb, dv, p, geo, o);
            let gyl = gather_line(gy, 0, dv, p, geo, o);
            let a = line_weights(&ql, &kl, tabs.as_ref(), len, d, self.scale);
            let mut ga = vec![T::zero(); len * len];
            let mut gvl = vec![T::zero(); dv * len];
            for j in 0..len {
                let off = len - 1 - j;
                let (aj, gaj) = (&a[j * len..(j + 1) * len], &mut ga[j * len..(j + 1) * len]);
                for c in 0..dv {
                    let g = gyl[c * len + j];
                    let vc = &vl[c * len..(c + 1) * len];
                    let gvc = &mut gvl[c * len..(c + 1) * len];
                    for w in 0..len {
                        gaj[w] += g * vc[w];
                        gvc[w] += aj[w] * g;
                    }
                    if let (Some(t), Some(gt)) = (&tabs, grads.tables.as_mut()) {
                        let rv = &t.v[c * span + off..c * span + off + len];
                        let grv = &mut gt.v[c * span + off..c * span + off + len];
                        for w in 0..len {
                            gaj[w] += g * rv[w];
                            grv[w] += aj[w] * g;
                        }
                    }
                }
            }
            softmax_backward_rows(&mut ga, &a, len, self.scale);
            let mut gql = vec![T::zero(); d * len];
            let mut gkl = vec![T::zero(); d * len];
            for j in 0..len {
                let off = len - 1 - j;
                let gs = &ga[j * len..(j + 1) * len];
                for c in 0..d {
                    let qjc = ql[c * len + j];
                    let kc = &kl[c * len..(c + 1) * len];
                    let gkc = &mut gkl[c * len..(c + 1) * len];
                    match (&tabs, grads.tables.as_mut()) {
                        (Some(t), Some(gt)) => {
                            let rq = &t.q[c * span + off..c * span + off + len];
                            let rk = &t.k[c * span + off..c * span + off + len];
                            let mut gq = T::zero();
                            for w in 0..len {
                                gq += gs[w] * (kc[w] + rq[w]);
                                gkc[w] += gs[w] * (qjc + rk[w]);
                            }
                            gql[c * len + j] = gq;
                            let grq = &mut gt.q[c * span + off..c * span + off + len];
                            for w in 0..len {
                                grq[w] += gs[w] * qjc;
                            }
                            let grk = &mut gt.k[c * span + off..c * span + off + len];
                            for w in 0..len {
                                grk[w] += gs[w] * kc[w];
                            }
                        }
                        _ => {
                            let mut gq = T::zero();
                            for w in 0..len {
                                gq += gs[w] * kc[w];
                                gkc[w] += gs[w] * qjc;
                            }
                            gql[c * len + j] = gq;
                        }
                    }
                }
            }
            scatter_line(&mut grads.q, &gql, d, p, geo, o);
            scatter_line(&mut grads.k, &gkl, d, p, geo, o);
            scatter_line(&mut grads.v, &gvl, dv, p, geo, o);
        }
        grads
    }
}

fn axial_inputs<T: Scalar>(
    q: &Var<'_, T>,
    k: &Var<'_, T>,
    v: &Var<'_, T>,
    tables: Option<&EmbeddingTables<'_, T>>,
    axis: Axis,
    opts: AttentionOptions,
) -> Result<AxialInputs<T>> {
    let g = split_heads(q, k, v, opts.heads)?;
    let geo = AxialGeometry::new(g, axis);
    let tables = match tables {
        Some(t) => {
            let ph = check_table(&t.q, g.heads, g.depth, geo.len)?;
            if check_table(&t.k, g.heads, g.depth, geo.len)? != ph
                || check_table(&t.v, g.heads, g.v_depth, geo.len)? != ph
            {
                return Err(Error::dim(
                    "axial_attention",
                    "embedding tables mix shared and per-head layouts",
                ));
            }
            Some((
                (
                    (*t.q.value()).clone(),
                    (*t.k.value()).clone(),
                    (*t.v.value()).clone(),
                ),
                ph,
            ))
        }
        None => None,
    };
    Ok(AxialInputs {
        q: q.value(),
        k: k.value(),
        v: v.value(),
        tables,
        geo,
        scale: T::of(logit_scale(g.depth, opts)),
    })
}

/// Position-sensitive self-attention along one axis.
///
/// For a query at position `j` of a row (or column) the output is
/// `Σ_w softmax_w(q_jᵀk_w + q_jᵀr^q_{w−j} + k_wᵀr^k_{w−j}) (v_w + r^v_{w−j})`.
/// Passing `None` for `tables` drops the positional terms.
pub fn axial_position_sensitive_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    tables: Option<EmbeddingTables<'t, T>>,
    axis: Axis,
    opts: AttentionOptions,
) -> Result<Var<'t, T>> {
    let inputs = axial_inputs(&q, &k, &v, tables.as_ref(), axis, opts)?;
    let geo = inputs.geo;
    let g = geo.g;
    let (d, dv) = (g.depth, g.v_depth);
    let lines = g.groups() * geo.other;
    let pair_macs = lines * geo.len * geo.len;
    count(
        pair_macs * (d + dv)
            + if tables.is_some() {
                pair_macs * (2 * d + dv)
            } else {
                0
            },
    );
    let view = inputs.view();
    let groups: Vec<Vec<T>> = (0..g.groups())
        .into_par_iter()
        .map(|b| view.forward_group(b, false).0)
        .collect();
    let out = Tensor::from_parts(vec![g.n, g.heads * dv, g.h, g.w], groups.concat());
    let mut parents = vec![q, k, v];
    if let Some(t) = tables {
        parents.extend([t.q, t.k, t.v]);
    }
    Ok(q.tape().record(
        out,
        &parents,
        Box::new(move |gy| {
            let p = g.plane();
            let view = inputs.view();
            let gyd = gy.data();
            let parts: Vec<_> = (0..g.groups())
                .into_par_iter()
                .map(|b| view.backward_group(b, &gyd[b * dv * p..(b + 1) * dv * p]))
                .collect();
            let (mut gq, mut gk, mut gv) = (Vec::new(), Vec::new(), Vec::new());
            let mut table_grads = inputs.tables.as_ref().map(|(t, _)| {
                (
                    vec![T::zero(); t.0.numel()],
                    vec![T::zero(); t.1.numel()],
                    vec![T::zero(); t.2.numel()],
                )
            });
            for (b, part) in parts.into_iter().enumerate() {
                gq.extend(part.q);
                gk.extend(part.k);
                gv.extend(part.v);
                if let (Some((tq, tk, tv)), Some(gt), Some((_, per_head))) =
                    (table_grads.as_mut(), part.tables, inputs.tables.as_ref())
                {
                    let slot = if *per_head { b % g.heads } else { 0 };
                    let add = |dst: &mut [T], src: &[T]| {
                        let dst = &mut dst[slot * src.len()..(slot + 1) * src.len()];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    };
                    add(tq, &gt.q);
                    add(tk, &gt.k);
                    add(tv, &gt.v);
                }
            }
            let mut grads = vec![
                Tensor::from_parts(inputs.q.shape().to_vec(), gq),
                Tensor::from_parts(inputs.k.shape().to_vec(), gk),
                Tensor::from_parts(inputs.v.shape().to_vec(), gv),
            ];
            if let (Some((tq, tk, tv)), Some((t, _))) = (table_grads, inputs.tables.as_ref()) {
                grads.push(Tensor::from_parts(t.0.shape().to_vec(), tq));
                grads.push(Tensor::from_parts(t.1.shape().to_vec(), tk));
                grads.push(Tensor::from_parts(t.2.shape().to_vec(), tv));
            }
            grads
        }),
    ))
}

/// Softmax weights of [`axial_position_sensitive_attention`] as `[heads·N·other, L, L]`
/// (query along axis 1, key along axis 2), with heads outermost.
pub fn axial_attention_weights<T: Scalar>(
    q: Var<'_, T>,
    k: Var<'_, T>,
    v: Var<'_, T>,
    tables: Option<EmbeddingTables<'_, T>>,
    axis: Axis,
    opts: AttentionOptions,
) -> Result<Tensor<T>> {
    let inputs = axial_inputs(&q, &k, &v, tables.as_ref(), axis, opts)?;
    let geo = inputs.geo;
    let g = geo.g;
    let view = inputs.view();
    let per_group: Vec<Vec<T>> = (0..g.groups())
        .map(|b| view.forward_group(b, true).1)
        .collect();
    let mut data = Vec::with_capacity(g.groups() * geo.other * geo.len * geo.len);
    for head in 0..g.heads {
        for n in 0..g.n {
            data.extend_from_slice(&per_group[n * g.heads + head]);
        }
    }
    Ok(Tensor::from_parts(
        vec![g.heads * g.n * geo.other, geo.len, geo.len],
        data,
    ))
}
