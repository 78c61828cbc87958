//! Brute-force reference implementations shared by integration test targets.
#![allow(dead_code)]

pub mod attention;

use mpanet::raster::Mask;
use rand::Rng;

/// Mask whose pixels are set independently with probability `density`.
pub fn random_mask<R: Rng>(rng: &mut R, h: usize, w: usize, density: f64) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.random_bool(density))
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 8-connected components by union-find over every neighbouring pixel pair.
/// Returns (centroid (row, col), pixel count) ordered by each component's first pixel in
/// raster order.
pub fn components(mask: &Mask) -> Vec<((f64, f64), usize)> {
    let (h, w) = mask.dims();
    let on = |r: usize, c: usize| mask.get(r, c);
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            if !on(r, c) {
                continue;
            }
            for (dr, dc) in [(0isize, 1isize), (1, -1), (1, 0), (1, 1)] {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < h as isize && nc >= 0 && nc < w as isize && on(nr as usize, nc as usize) {
                    let (a, b) = (
                        find(&mut parent, r * w + c),
                        find(&mut parent, nr as usize * w + nc as usize),
                    );
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut first: Vec<usize> = Vec::new();
    let mut sums: std::collections::HashMap<usize, (f64, f64, usize, usize)> = Default::default();
    for i in 0..h * w {
        if !mask.pixels()[i] {
            continue;
        }
        let root = find(&mut parent, i);
        let e = sums.entry(root).or_insert_with(|| {
            first.push(root);
            (0.0, 0.0, 0, i)
        });
        e.0 += (i / w) as f64;
        e.1 += (i % w) as f64;
        e.2 += 1;
    }
    first
        .iter()
        .map(|root| {
            let (sr, sc, n, _) = sums[root];
            ((sr / n as f64, sc / n as f64), n)
        })
        .collect()
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Greedy matching: repeatedly take the closest unused (label, prediction) pair strictly
/// under `limit`, ties resolved by label index then prediction index.
pub fn greedy_matches(
    labels: &[(f64, f64)],
    preds: &[(f64, f64)],
    limit: f64,
) -> Vec<(usize, usize)> {
    let mut used_l = vec![false; labels.len()];
    let mut used_p = vec![false; preds.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, &l) in labels.iter().enumerate() {
            for (j, &p) in preds.iter().enumerate() {
                let d = dist(l, p);
                if used_l[i] || used_p[j] || d >= limit {
                    continue;
                }
                if best.is_none_or(|(bd, bi, bj)| (d, i, j) < (bd, bi, bj)) {
                    best = Some((d, i, j));
                }
            }
        }
        match best {
            Some((_, i, j)) => {
                used_l[i] = true;
                used_p[j] = true;
                out.push((i, j));
            }
            None => return out,
        }
    }
}

/// Largest number of one-to-one pairs under `limit`, by exhaustive search.
pub fn optimal_match_count(labels: &[(f64, f64)], preds: &[(f64, f64)], limit: f64) -> usize {
    fn go(
        i: usize,
        labels: &[(f64, f64)],
        preds: &[(f64, f64)],
        used: &mut Vec<bool>,
        limit: f64,
    ) -> usize {
        if i == labels.len() {
            return 0;
        }
        let mut best = go(i + 1, labels, preds, used, limit);
        for j in 0..preds.len() {
            if !used[j] && dist(labels[i], preds[j]) < limit {
                used[j] = true;
                best = best.max(1 + go(i + 1, labels, preds, used, limit));
                used[j] = false;
            }
        }
        best
    }
    go(0, labels, preds, &mut vec![false; preds.len()], limit)
}

#[derive(Clone, Debug, Default)]
pub struct BruteImage {
    pub t: u64,
    pub p: u64,
    pub tp: u64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_label: usize,
    pub n_pred: usize,
    pub n_matched: usize,
    pub false_pixels: usize,
}

#[derive(Clone, Debug, Default)]
pub struct BruteReport {
    pub images: Vec<BruteImage>,
    pub iou: f64,
    pub iou_as_printed: f64,
    pub niou: f64,
    pub f1: f64,
    pub f1_as_printed: f64,
    pub pd: f64,
    pub fa: f64,
}

/// Every metric computed with plain loops over `(prediction, label)` pairs.
pub fn brute_metrics(pairs: &[(Mask, Mask)]) -> BruteReport {
    let mut rep = BruteReport::default();
    let (mut st, mut sp, mut stp) = (0u64, 0u64, 0u64);
    let (mut matched, mut labels, mut false_px, mut pixels) = (0usize, 0usize, 0usize, 0usize);
    for (pred, label) in pairs {
        let mut img = BruteImage::default();
        let (h, w) = label.dims();
        for r in 0..h {
            for c in 0..w {
                let (p, l) = (pred.get(r, c), label.get(r, c));
                if l {
                    img.t += 1;
                }
                if p {
                    img.p += 1;
                }
                if p && l {
                    img.tp += 1;
                }
            }
        }
        let union = img.t + img.p - img.tp;
        img.iou = if union == 0 {
            1.0
        } else {
            img.tp as f64 / union as f64
        };
        img.precision = if img.p > 0 {
            img.tp as f64 / img.p as f64
        } else if img.t == 0 {
            1.0
        } else {
            0.0
        };
        img.recall = if img.t > 0 {
            img.tp as f64 / img.t as f64
        } else if img.p == 0 {
            1.0
        } else {
            0.0
        };
        let lc = components(label);
        let pc = components(pred);
        let lcent: Vec<_> = lc.iter().map(|c| c.0).collect();
        let pcent: Vec<_> = pc.iter().map(|c| c.0).collect();
        let m = greedy_matches(&lcent, &pcent, 3.0);
        img.n_label = lc.len();
        img.n_pred = pc.len();
        img.n_matched = m.len();
        img.false_pixels = (0..pc.len())
            .filter(|j| !m.iter().any(|&(_, mj)| mj == *j))
            .map(|j| pc[j].1)
            .sum();
        st += img.t;
        sp += img.p;
        stp += img.tp;
        matched += img.n_matched;
        labels += img.n_label;
        false_px += img.false_pixels;
        pixels += h * w;
        rep.images.push(img);
    }
    let n = pairs.len() as f64;
    rep.iou = if st + sp - stp == 0 {
        1.0
    } else {
        stp as f64 / (st + sp - stp) as f64
    };
    rep.iou_as_printed = if st + stp == 0 {
        1.0
    } else {
        stp as f64 / (st + stp) as f64
    };
    rep.niou = rep.images.iter().map(|i| i.iou).sum::<f64>() / n;
    let term = |i: &BruteImage| {
        if i.precision + i.recall == 0.0 {
            0.0
        } else {
            i.precision * i.recall / (i.precision + i.recall)
        }
    };
    rep.f1_as_printed = rep.images.iter().map(term).sum::<f64>() / n;
    rep.f1 = rep.images.iter().map(|i| 2.0 * term(i)).sum::<f64>() / n;
    rep.pd = matched as f64 / labels as f64;
    rep.fa = false_px as f64 / pixels as f64;
    rep
}
