use std::collections::VecDeque;

use crate::raster::Mask;

/// One 8-connected component of a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    /// Unweighted mean (row, col) of the member pixels.
    pub centroid: (f64, f64),
    /// Member pixels as (row, col), in discovery order.
    pub pixels: Vec<(usize, usize)>,
}

impl Target {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn distance_to(&self, other: &Target) -> f64 {
        (self.centroid.0 - other.centroid.0).hypot(self.centroid.1 - other.centroid.1)
    }
}

/// 8-connected components of the positive pixels, ordered by their first pixel in raster order.
pub fn extract_targets(mask: &Mask) -> Vec<Target> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut targets = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || !mask.pixels()[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            pixels.push((r, c));
            for nr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    let j = nr * w + nc;
                    if !seen[j] && mask.pixels()[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        let n = pixels.len() as f64;
        let (sr, sc) = pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
        targets.push(Target {
            centroid: (sr / n, sc / n),
            pixels,
        });
    }
    targets
}

/// Outcome of matching predicted components to label components in one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMatch {
    pub label_targets: Vec<Target>,
    pub pred_targets: Vec<Target>,
    /// (label index, prediction index, centroid distance).
    pub matches: Vec<(usize, usize, f64)>,
    pub t_correct: usize,
    pub t_all: usize,
    /// Pixels of predicted components left unmatched.
    pub p_false: usize,
    /// Pixels in the image.
    pub p_all: usize,
}

/// Greedy one-to-one matching in ascending centroid distance; pairs closer than
/// `max_distance` (strictly) count as detections.
pub fn match_targets(
    label_targets: Vec<Target>,
    pred_targets: Vec<Target>,
    image_pixels: usize,
    max_distance: f64,
) -> TargetMatch {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (li, l) in label_targets.iter().enumerate() {
        for (pi, p) in pred_targets.iter().enumerate() {
            let d = l.distance_to(p);
            if d < max_distance {
                pairs.push((d, li, pi));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut label_used = vec![false; label_targets.len()];
    let mut pred_used = vec![false; pred_targets.len()];
    let mut matches = Vec::new();
    for (d, li, pi) in pairs {
        if !label_used[li] && !pred_used[pi] {
            label_used[li] = true;
            pred_used[pi] = true;
            matches.push((li, pi, d));
        }
    }
    let p_false = pred_targets
        .iter()
        .zip(&pred_used)
        .filter(|(_, &u)| !u)
        .map(|(t, _)| t.area())
        .sum();
    TargetMatch {
        t_correct: matches.len(),
        t_all: label_targets.len(),
        p_false,
        p_all: image_pixels,
        label_targets,
        pred_targets,
        matches,
    }
}
