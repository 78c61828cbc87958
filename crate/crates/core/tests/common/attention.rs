//! Scalar-loop attention references.

use mpanet::attention::{
    axial_position_sensitive_attention, nonlocal_attention, AttentionOptions, Axis, EmbeddingTables,
};
use mpanet::autodiff::Tape;
use mpanet::{Error, Tensor};
use rand_chacha::ChaCha8Rng;

pub fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Flat index of element (n, c, y, x) in an N×C×H×W tensor.
pub fn at(s: &[usize], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * s[1] + c) * s[2] + y) * s[3] + x
}

pub fn scale_for(depth: usize, scaled: bool) -> f64 {
    if scaled {
        1.0 / (depth as f64).sqrt()
    } else {
        1.0
    }
}

/// Every output position is a softmax-weighted sum over all positions of its image.
pub fn nonlocal_oracle(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    heads: usize,
    scaled: bool,
) -> Vec<f64> {
    let (s, vs) = (q.shape().to_vec(), v.shape().to_vec());
    let (d, dv) = (s[1] / heads, vs[1] / heads);
    let sc = scale_for(d, scaled);
    let mut out = vec![0.0; v.numel()];
    for n in 0..s[0] {
        for h in 0..heads {
            for i in 0..s[2] {
                for j in 0..s[3] {
                    let mut logits = Vec::new();
                    for y in 0..s[2] {
                        for x in 0..s[3] {
                            let mut l = 0.0;
                            for c in 0..d {
                                l += q.data()[at(&s, n, h * d + c, i, j)]
                                    * k.data()[at(&s, n, h * d + c, y, x)];
                            }
                            logits.push(l * sc);
                        }
                    }
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in 0..dv {
                        let mut acc = 0.0;
                        for y in 0..s[2] {
                            for x in 0..s[3] {
                                acc += e[y * s[3] + x] / z * v.data()[at(&vs, n, h * dv + c, y, x)];
                            }
                        }
                        out[at(&vs, n, h * dv + c, i, j)] = acc;
                    }
                }
            }
        }
    }
    out
}

pub struct Tables {
    pub q: Tensor<f64>,
    pub k: Tensor<f64>,
    pub v: Tensor<f64>,
    pub per_head: bool,
}

impl Tables {
    fn entry(t: &Tensor<f64>, per_head: bool, head: usize, c: usize, offset: usize) -> f64 {
        let span = *t.shape().last().unwrap();
        let depth = t.shape()[t.rank() - 2];
        let h = if per_head { head } else { 0 };
        t.data()[(h * depth + c) * span + offset]
    }
}

/// Position-sensitive attention along one axis written as plain nested loops.
pub fn axial_oracle(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    tables: Option<&Tables>,
    axis: Axis,
    heads: usize,
    scaled: bool,
) -> Vec<f64> {
    let (s, vs) = (q.shape().to_vec(), v.shape().to_vec());
    let (d, dv) = (s[1] / heads, vs[1] / heads);
    let sc = scale_for(d, scaled);
    let len = if axis == Axis::Width { s[3] } else { s[2] };
    let pos = |y: usize, x: usize, t: usize| if axis == Axis::Width { (y, t) } else { (t, x) };
    let mut out = vec![0.0; v.numel()];
    for n in 0..s[0] {
        for h in 0..heads {
            for y in 0..s[2] {
                for x in 0..s[3] {
                    let j = if axis == Axis::Width { x } else { y };
                    let mut logits = vec![0.0; len];
                    for (w, l) in logits.iter_mut().enumerate() {
                        let (ky, kx) = pos(y, x, w);
                        let off = w + len - 1 - j;
                        for c in 0..d {
                            let qc = q.data()[at(&s, n, h * d + c, y, x)];
                            let kc = k.data()[at(&s, n, h * d + c, ky, kx)];
                            *l += qc * kc;
                            if let Some(t) = tables {
                                *l += qc * Tables::entry(&t.q, t.per_head, h, c, off);
                                *l += kc * Tables::entry(&t.k, t.per_head, h, c, off);
                            }
                        }
                        *l *= sc;
                    }
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in 0..dv {
                        let mut acc = 0.0;
                        for (w, ew) in e.iter().enumerate() {
                            let (ky, kx) = pos(y, x, w);
                            let mut val = v.data()[at(&vs, n, h * dv + c, ky, kx)];
                            if let Some(t) = tables {
                                val += Tables::entry(&t.v, t.per_head, h, c, w + len - 1 - j);
                            }
                            acc += ew / z * val;
                        }
                        out[at(&vs, n, h * dv + c, y, x)] = acc;
                    }
                }
            }
        }
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn run_axial(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    tables: Option<&Tables>,
    axis: Axis,
    opts: AttentionOptions,
) -> Result<Vec<f64>, Error> {
    let tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let tabs = tables.map(|t| EmbeddingTables {
        q: tape.constant(t.q.clone()),
        k: tape.constant(t.k.clone()),
        v: tape.constant(t.v.clone()),
    });
    let y = axial_position_sensitive_attention(qv, kv, vv, tabs, axis, opts)?;
    let data = y.value().data().to_vec();
    Ok(data)
}

pub fn run_nonlocal(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    opts: AttentionOptions,
) -> Vec<f64> {
    let tape = Tape::new();
    let y = nonlocal_attention(
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
        opts,
    )
    .unwrap();
    let data = y.value().data().to_vec();
    data
}

pub fn random_tables(
    heads: usize,
    d: usize,
    dv: usize,
    len: usize,
    per_head: bool,
    rng: &mut ChaCha8Rng,
) -> Tables {
    let span = 2 * len - 1;
    let shape = |depth: usize| {
        if per_head {
            vec![heads, depth, span]
        } else {
            vec![depth, span]
        }
    };
    Tables {
        q: rand_t(&shape(d), rng),
        k: rand_t(&shape(d), rng),
        v: rand_t(&shape(dv), rng),
        per_head,
    }
}

/// Non-local attention applied to every row (or column) as its own 1×L image.
pub fn nonlocal_along_axis(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    axis: Axis,
    opts: AttentionOptions,
) -> Vec<f64> {
    let tape = Tape::new();
    let lines = |t: &Tensor<f64>| {
        let [n, c, h, w] = *t.shape() else {
            unreachable!()
        };
        let x = tape.constant(t.clone());
        match axis {
            Axis::Width => x
                .permute(&[0, 2, 1, 3])
                .unwrap()
                .reshape([n * h, c, 1, w])
                .unwrap(),
            Axis::Height => x
                .permute(&[0, 3, 1, 2])
                .unwrap()
                .reshape([n * w, c, h, 1])
                .unwrap(),
        }
    };
    let y = nonlocal_attention(lines(q), lines(k), lines(v), opts).unwrap();
    let [n, c, h, w] = *v.shape() else {
        unreachable!()
    };
    let back = match axis {
        Axis::Width => y
            .reshape([n, h, c, w])
            .unwrap()
            .permute(&[0, 2, 1, 3])
            .unwrap(),
        Axis::Height => y
            .reshape([n, w, c, h])
            .unwrap()
            .permute(&[0, 2, 3, 1])
            .unwrap(),
    };
    let data = back.value().data().to_vec();
    data
}
