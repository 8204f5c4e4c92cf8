//! Evaluation mathematics: confusion counts, IOU, pixel-level curves and the
//! slide-level positive-pixel-fraction rule.
//!
//! An IOU of 0/0 (class absent from both masks) counts as 1.0.

mod curves;

use std::ops::{Add, AddAssign};

use serde::Serialize;
use thiserror::Error;

use crate::mask::BinaryMask;

pub use curves::{
    iso_f1_points, pr_curve, roc_curve, CurveKind, CurvePoint, CurveSeries, ScoreTable, TieGroup, DEFAULT_BINS,
    EXACT_LIMIT,
};

/// Default slide-rule fraction: positive when predicted tumor pixels exceed
/// 0.5% of the image.
pub const SLIDE_FRACTION: f64 = 0.005;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("degenerate labels: {positives} positives, {negatives} negatives")]
    DegenerateLabels { positives: u64, negatives: u64 },
    #[error("no positive labels")]
    NoPositives,
    #[error("no slide verdicts")]
    EmptyVerdicts,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Pixel counts for the tumor class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts over parallel 0/1 slices of equal length.
    pub fn from_slices(pred: &[u8], truth: &[u8]) -> Self {
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p != 0, t != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn pixel_accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn confusion_counts(pred: &BinaryMask, truth: &BinaryMask) -> Result<ConfusionCounts, MetricsError> {
    if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
        return Err(MetricsError::DimMismatch(
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height(),
        ));
    }
    Ok(ConfusionCounts::from_slices(pred.as_slice(), truth.as_slice()))
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `(background, tumor)` IOU. Background treats tumor false negatives as its
/// false positives and vice versa.
pub fn iou_per_class(c: &ConfusionCounts) -> (f64, f64) {
    let background = ratio_or_one(c.tn, c.tn + c.fn_ + c.fp);
    let tumor = ratio_or_one(c.tp, c.tp + c.fp + c.fn_);
    (background, tumor)
}

pub fn mean_iou(c: &ConfusionCounts) -> f64 {
    let (b, t) = iou_per_class(c);
    (b + t) / 2.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlideVerdict {
    pub id: String,
    pub positive_pixel_count: u64,
    pub total_pixels: u64,
    pub predicted: bool,
    pub truth: bool,
}

/// Strict `count > fraction · total`.
pub fn exceeds_fraction(count: u64, total: u64, fraction: f64) -> bool {
    count as f64 > fraction * total as f64
}

/// `(positive count, total, predicted)` under the default fraction.
pub fn slide_classify(mask: &BinaryMask) -> (u64, u64, bool) {
    slide_classify_with(mask, SLIDE_FRACTION)
}

pub fn slide_classify_with(mask: &BinaryMask, fraction: f64) -> (u64, u64, bool) {
    let count = mask.count_positive() as u64;
    let total = mask.len() as u64;
    (count, total, exceeds_fraction(count, total, fraction))
}

/// Slide-level confusion table and rates; a rate with an empty denominator
/// is `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlideSummary {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub counts: ConfusionCounts,
}

pub fn slide_metrics(verdicts: &[SlideVerdict]) -> Result<SlideSummary, MetricsError> {
    if verdicts.is_empty() {
        return Err(MetricsError::EmptyVerdicts);
    }
    let pred: Vec<u8> = verdicts.iter().map(|v| u8::from(v.predicted)).collect();
    let truth: Vec<u8> = verdicts.iter().map(|v| u8::from(v.truth)).collect();
    let c = ConfusionCounts::from_slices(&pred, &truth);
    let rate = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    Ok(SlideSummary {
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        sensitivity: rate(c.tp, c.tp + c.fn_),
        specificity: rate(c.tn, c.tn + c.fp),
        counts: c,
    })
}

/// Report written by evaluation; absent slide rates serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub iou_background: f64,
    pub iou_tumor: f64,
    pub mean_iou: f64,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub slide_accuracy: f64,
    pub slide_sensitivity: Option<f64>,
    pub slide_specificity: Option<f64>,
    pub threshold_fraction: f64,
    pub n_test_images: usize,
    pub n_test_pixels: u64,
}
