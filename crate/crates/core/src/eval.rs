//! Test-set evaluation: per-image prediction, pooled pixel curves, IOU and
//! slide-level verdicts.

use std::num::NonZeroUsize;

use thiserror::Error;

use crate::data::{normalize, ImageRecord};
use crate::mask::BinaryMask;
use crate::metrics::{
    iou_per_class, slide_metrics, ConfusionCounts, CurveSeries, EvalSummary, MetricsError, ScoreTable, SlideVerdict,
    SLIDE_FRACTION,
};
use crate::model::{Mode, Model, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("{id}: prediction is {pred_w}x{pred_h} but ground truth is {gt_w}x{gt_h}")]
    DimMismatch {
        id: String,
        pred_w: usize,
        pred_h: usize,
        gt_w: usize,
        gt_h: usize,
    },
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub threshold_fraction: f64,
    /// Worker threads for per-image prediction; results do not depend on it.
    pub threads: NonZeroUsize,
    /// Tumor-probability cut replacing argmax for the binary mask.
    pub prob_threshold: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold_fraction: SLIDE_FRACTION,
            threads: NonZeroUsize::MIN,
            prob_threshold: None,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.threshold_fraction >= 0.0 && self.threshold_fraction < 1.0) {
            return Err(EvalError::InvalidOption(format!(
                "threshold fraction must be in [0, 1), got {}",
                self.threshold_fraction
            )));
        }
        if let Some(t) = self.prob_threshold {
            if !(0.0..1.0).contains(&t) {
                return Err(EvalError::InvalidOption(format!("probability threshold must be in [0, 1), got {t}")));
            }
        }
        Ok(())
    }
}

/// One image's prediction against its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredImage {
    pub id: String,
    /// Tumor score per pixel, row-major.
    pub scores: Vec<f64>,
    pub pred: BinaryMask,
    pub truth: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEval {
    pub id: String,
    pub counts: ConfusionCounts,
    pub verdict: SlideVerdict,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub summary: EvalSummary,
    /// Absent when the pooled pixels hold a single class.
    pub roc: Option<CurveSeries>,
    /// Absent when no pixel is tumor.
    pub pr: Option<CurveSeries>,
    pub images: Vec<ImageEval>,
}

/// Maps `f` over `items` on up to `threads` scoped workers, preserving order.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: NonZeroUsize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let workers = threads.get().min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

/// Runs the model in eval mode over `records` and scores the predictions.
pub fn evaluate(model: &Model, records: &[&ImageRecord], options: &EvalOptions) -> Result<EvalOutput, EvalError> {
    options.validate()?;
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    if model.mode() != Mode::Eval {
        return Err(ModelError::NotEvalMode.into());
    }
    let scored = parallel_map(records, options.threads, |r| -> Result<ScoredImage, EvalError> {
        let (prob, argmax) = model.predict_mask(&normalize(&r.image))?.remove(0);
        let pred = match options.prob_threshold {
            Some(t) => prob.threshold(t as f32),
            None => argmax,
        };
        Ok(ScoredImage {
            id: r.id.clone(),
            scores: prob.data.iter().map(|&p| p as f64).collect(),
            pred,
            truth: r.mask.clone(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    score(&scored, options.threshold_fraction)
}

/// Pools every pixel of every image into one population for the curves;
/// IOU comes from summed confusion counts.
pub fn score(images: &[ScoredImage], threshold_fraction: f64) -> Result<EvalOutput, EvalError> {
    if images.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut per_image = Vec::with_capacity(images.len());
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for im in images {
        if (im.pred.width(), im.pred.height()) != (im.truth.width(), im.truth.height())
            || im.scores.len() != im.truth.len()
        {
            return Err(EvalError::DimMismatch {
                id: im.id.clone(),
                pred_w: im.pred.width(),
                pred_h: im.pred.height(),
                gt_w: im.truth.width(),
                gt_h: im.truth.height(),
            });
        }
        let counts = ConfusionCounts::from_slices(im.pred.as_slice(), im.truth.as_slice());
        let (count, total) = (im.pred.count_positive() as u64, im.pred.len() as u64);
        per_image.push(ImageEval {
            id: im.id.clone(),
            counts,
            verdict: SlideVerdict {
                id: im.id.clone(),
                positive_pixel_count: count,
                total_pixels: total,
                predicted: crate::metrics::exceeds_fraction(count, total, threshold_fraction),
                truth: im.truth.count_positive() > 0,
            },
        });
        scores.extend_from_slice(&im.scores);
        labels.extend(im.truth.as_slice().iter().map(|&v| v != 0));
    }
    let table = ScoreTable::auto(&scores, &labels)?;
    let roc = table.roc().ok();
    let pr = table.pr().ok();
    let counts: ConfusionCounts = per_image.iter().map(|i| i.counts).sum();
    let verdicts: Vec<SlideVerdict> = per_image.iter().map(|i| i.verdict.clone()).collect();
    let slides = slide_metrics(&verdicts)?;
    let (iou_background, iou_tumor) = iou_per_class(&counts);
    let summary = EvalSummary {
        iou_background,
        iou_tumor,
        mean_iou: (iou_background + iou_tumor) / 2.0,
        roc_auc: roc.as_ref().map(|c| c.auc),
        pr_auc: pr.as_ref().map(|c| c.auc),
        slide_accuracy: slides.accuracy,
        slide_sensitivity: slides.sensitivity,
        slide_specificity: slides.specificity,
        threshold_fraction,
        n_test_images: images.len(),
        n_test_pixels: counts.total(),
    };
    Ok(EvalOutput {
        summary,
        roc,
        pr,
        images: per_image,
    })
}
