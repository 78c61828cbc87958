//! Segmentation and detection metrics: IoU, nIoU, normalized F1, Pd and Fa.
//!
//! Pixel metrics use the label (T), predicted (P) and true-positive (TP) pixel counts.
//! Detection metrics extract 8-connected components, match prediction centroids to label
//! centroids one-to-one (strictly closer than 3 px), and count the pixels of unmatched
//! predicted components as false alarms.

mod targets;

use std::fmt::Write as _;
use std::path::Path;

pub use targets::{extract_targets, match_targets, Target, TargetMatch};

use crate::error::{Error, Result};
use crate::raster::Mask;

pub const MATCH_DISTANCE: f64 = 3.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    /// Label-positive pixels.
    pub t: u64,
    /// Predicted-positive pixels.
    pub p: u64,
    pub tp: u64,
}

impl ConfusionCounts {
    pub fn merge(self, other: Self) -> Self {
        Self {
            t: self.t + other.t,
            p: self.p + other.p,
            tp: self.tp + other.tp,
        }
    }

    /// Precision and recall; an empty prediction of an empty label scores 1 on both.
    pub fn precision_recall(&self) -> (f64, f64) {
        let ratio = |num: u64, den: u64, other_empty: bool| match den {
            0 if other_empty => 1.0,
            0 => 0.0,
            d => num as f64 / d as f64,
        };
        (
            ratio(self.tp, self.p, self.t == 0),
            ratio(self.tp, self.t, self.p == 0),
        )
    }
}

pub fn confusion(pred: &Mask, label: &Mask) -> Result<ConfusionCounts> {
    if pred.dims() != label.dims() {
        return Err(Error::dim(
            "confusion",
            format!("prediction {:?} vs label {:?}", pred.dims(), label.dims()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in pred.pixels().iter().zip(label.pixels()) {
        c.t += l as u64;
        c.p += p as u64;
        c.tp += (p && l) as u64;
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IouMode {
    /// `TP / (T + P − TP)`.
    #[default]
    Union,
    /// `TP / (T + P − FP)` with `FP = P − TP`, kept for auditing the printed formula.
    AsPrinted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum F1Mode {
    /// `2·P·R / (P + R)`.
    #[default]
    Harmonic,
    /// `P·R / (P + R)`.
    AsPrinted,
}

/// Intersection over union; two empty masks score 1.
pub fn iou(c: &ConfusionCounts, mode: IouMode) -> f64 {
    let den = match mode {
        IouMode::Union => c.t + c.p - c.tp,
        IouMode::AsPrinted => c.t + c.tp,
    };
    if den == 0 {
        1.0
    } else {
        c.tp as f64 / den as f64
    }
}

/// Mean per-image IoU.
pub fn niou(per_image: &[ConfusionCounts]) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::Contract("nIoU needs at least one image".into()));
    }
    Ok(per_image
        .iter()
        .map(|c| iou(c, IouMode::Union))
        .sum::<f64>()
        / per_image.len() as f64)
}

fn f1_term(precision: f64, recall: f64, mode: F1Mode) -> f64 {
    let sum = precision + recall;
    if sum == 0.0 {
        return 0.0;
    }
    let f = precision * recall / sum;
    match mode {
        F1Mode::Harmonic => 2.0 * f,
        F1Mode::AsPrinted => f,
    }
}

/// Mean per-image F1 from per-image (precision, recall).
pub fn f1_normalized(per_image: &[(f64, f64)], mode: F1Mode) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::Contract("F1 needs at least one image".into()));
    }
    Ok(per_image
        .iter()
        .map(|&(p, r)| f1_term(p, r, mode))
        .sum::<f64>()
        / per_image.len() as f64)
}

/// Probability of detection and false-alarm pixel rate over a set of images.
pub fn pd_fa(matches: &[TargetMatch]) -> Result<(f64, f64)> {
    let t_all: usize = matches.iter().map(|m| m.t_all).sum();
    if t_all == 0 {
        return Err(Error::UndefinedPd);
    }
    let t_correct: usize = matches.iter().map(|m| m.t_correct).sum();
    let p_false: usize = matches.iter().map(|m| m.p_false).sum();
    let p_all: usize = matches.iter().map(|m| m.p_all).sum();
    Ok((
        t_correct as f64 / t_all as f64,
        p_false as f64 / p_all as f64,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsConfig {
    pub iou_mode: IouMode,
    pub f1_mode: F1Mode,
    pub match_distance: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            iou_mode: IouMode::Union,
            f1_mode: F1Mode::Harmonic,
            match_distance: MATCH_DISTANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub counts: ConfusionCounts,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_label_targets: usize,
    pub n_pred_targets: usize,
    pub n_matched: usize,
    pub false_pixels: usize,
    pub pixels: usize,
}

impl ImageMetrics {
    pub fn compute(
        id: impl Into<String>,
        pred: &Mask,
        label: &Mask,
        cfg: &MetricsConfig,
    ) -> Result<Self> {
        let counts = confusion(pred, label)?;
        let (precision, recall) = counts.precision_recall();
        let m = match_targets(
            extract_targets(label),
            extract_targets(pred),
            label.len(),
            cfg.match_distance,
        );
        Ok(Self {
            id: id.into(),
            iou: iou(&counts, cfg.iou_mode),
            counts,
            precision,
            recall,
            n_label_targets: m.t_all,
            n_pred_targets: m.pred_targets.len(),
            n_matched: m.t_correct,
            false_pixels: m.p_false,
            pixels: m.p_all,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ImageMetrics>,
    pub totals: ConfusionCounts,
    pub iou: f64,
    pub niou: f64,
    /// F1 in the configured mode.
    pub f1: f64,
    pub f1_harmonic: f64,
    pub f1_as_printed: f64,
    pub pd: f64,
    /// Absolute false-alarm rate.
    pub fa: f64,
}

impl MetricsReport {
    /// Aggregates per-image rows.
    pub fn from_rows(rows: Vec<ImageMetrics>, cfg: &MetricsConfig) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract(
                "cannot report metrics over zero images".into(),
            ));
        }
        let totals = rows
            .iter()
            .fold(ConfusionCounts::default(), |a, r| a.merge(r.counts));
        let per_image: Vec<ConfusionCounts> = rows.iter().map(|r| r.counts).collect();
        let pr: Vec<(f64, f64)> = rows.iter().map(|r| (r.precision, r.recall)).collect();
        let t_all: usize = rows.iter().map(|r| r.n_label_targets).sum();
        if t_all == 0 {
            return Err(Error::UndefinedPd);
        }
        let t_correct: usize = rows.iter().map(|r| r.n_matched).sum();
        let p_false: usize = rows.iter().map(|r| r.false_pixels).sum();
        let p_all: usize = rows.iter().map(|r| r.pixels).sum();
        let f1_harmonic = f1_normalized(&pr, F1Mode::Harmonic)?;
        let f1_as_printed = f1_normalized(&pr, F1Mode::AsPrinted)?;
        Ok(Self {
            iou: iou(&totals, cfg.iou_mode),
            niou: niou(&per_image)?,
            f1: match cfg.f1_mode {
                F1Mode::Harmonic => f1_harmonic,
                F1Mode::AsPrinted => f1_as_printed,
            },
            f1_harmonic,
            f1_as_printed,
            pd: t_correct as f64 / t_all as f64,
            fa: p_false as f64 / p_all as f64,
            totals,
            rows,
        })
    }

    /// False-alarm rate in units of 10⁻⁶.
    pub fn fa_e6(&self) -> f64 {
        self.fa * 1e6
    }

    pub fn per_image_csv(&self) -> String {
        let mut out = String::from("id,T,P,TP,iou,precision,recall,n_label_targets,n_pred_targets,n_matched,false_pixels\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.id,
                r.counts.t,
                r.counts.p,
                r.counts.tp,
                r.iou,
                r.precision,
                r.recall,
                r.n_label_targets,
                r.n_pred_targets,
                r.n_matched,
                r.false_pixels
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "iou,niou,pd,fa,fa_e6,f1,f1_harmonic,f1_as_printed\n{},{},{},{},{},{},{},{}\n",
            self.iou,
            self.niou,
            self.pd,
            self.fa,
            self.fa_e6(),
            self.f1,
            self.f1_harmonic,
            self.f1_as_printed
        )
    }

    pub fn write_csv(&self, per_image: impl AsRef<Path>, summary: impl AsRef<Path>) -> Result<()> {
        for (path, text) in [
            (per_image.as_ref(), self.per_image_csv()),
            (summary.as_ref(), self.summary_csv()),
        ] {
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Scores predicted masks against labels, image by image.
pub fn evaluate(items: &[(String, Mask, Mask)], cfg: &MetricsConfig) -> Result<MetricsReport> {
    let rows = items
        .iter()
        .map(|(id, pred, label)| ImageMetrics::compute(id.clone(), pred, label, cfg))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_rows(rows, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(t: u64, p: u64, tp: u64) -> ConfusionCounts {
        ConfusionCounts { t, p, tp }
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&counts(10, 10, 10), IouMode::Union), 1.0);
        assert_eq!(iou(&counts(5, 5, 0), IouMode::Union), 0.0);
        assert!((iou(&counts(10, 10, 5), IouMode::Union) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&counts(0, 0, 0), IouMode::Union), 1.0);
    }

    #[test]
    fn niou_averages_images() {
        assert_eq!(niou(&[counts(4, 4, 4), counts(3, 2, 0)]).unwrap(), 0.5);
        let c = counts(7, 9, 4);
        assert_eq!(niou(&[c]).unwrap(), iou(&c, IouMode::Union));
    }

    #[test]
    fn f1_modes() {
        assert_eq!(
            f1_normalized(&[(1.0, 1.0), (1.0, 1.0)], F1Mode::Harmonic).unwrap(),
            1.0
        );
        assert_eq!(f1_normalized(&[(0.5, 0.5)], F1Mode::Harmonic).unwrap(), 0.5);
        assert_eq!(
            f1_normalized(&[(0.5, 0.5)], F1Mode::AsPrinted).unwrap(),
            0.25
        );
        assert_eq!(f1_normalized(&[(0.0, 0.0)], F1Mode::Harmonic).unwrap(), 0.0);
    }

    #[test]
    fn confusion_rejects_mismatched_extents() {
        assert!(confusion(&Mask::filled(2, 2, false), &Mask::filled(2, 3, false)).is_err());
    }

    #[test]
    fn pd_fa_edge_cases() {
        let none = match_targets(vec![], vec![], 100, MATCH_DISTANCE);
        assert!(matches!(pd_fa(&[none]), Err(Error::UndefinedPd)));
        let label = Mask::from_fn(8, 8, |r, c| r < 2 && c < 2);
        let missed = match_targets(extract_targets(&label), vec![], 64, MATCH_DISTANCE);
        assert_eq!(pd_fa(&[missed]).unwrap(), (0.0, 0.0));
        let hit = match_targets(
            extract_targets(&label),
            extract_targets(&label),
            64,
            MATCH_DISTANCE,
        );
        assert_eq!(pd_fa(&[hit]).unwrap(), (1.0, 0.0));
    }
}
