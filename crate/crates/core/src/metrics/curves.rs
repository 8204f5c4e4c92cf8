//! Pixel-level ROC and precision-recall curves.

use serde::Serialize;

use super::MetricsError;

/// Populations above this size are bucketed before curve construction.
pub const EXACT_LIMIT: usize = 10_000_000;
pub const DEFAULT_BINS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    Roc,
    Pr,
}

/// ROC: `x` = FPR, `y` = TPR. PR: `x` = recall, `y` = precision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveSeries {
    pub kind: CurveKind,
    pub points: Vec<CurvePoint>,
    pub auc: f64,
}

impl CurveSeries {
    /// Header `threshold,fpr,tpr` or `threshold,recall,precision`, then one row per point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(match self.kind {
            CurveKind::Roc => "threshold,fpr,tpr\n",
            CurveKind::Pr => "threshold,recall,precision\n",
        });
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.x, p.y));
        }
        out
    }
}

/// Positives and negatives sharing one score (or one bin).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TieGroup<S> {
    pub score: S,
    pub pos: u64,
    pub neg: u64,
}

/// Scores grouped by distinct value in descending order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub groups: Vec<TieGroup<f64>>,
    pub positives: u64,
    pub negatives: u64,
}

impl ScoreTable {
    /// Exact grouping of every distinct score.
    pub fn exact(scores: &[f64], labels: &[bool]) -> Result<Self, MetricsError> {
        check_inputs(scores, labels)?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut groups: Vec<TieGroup<f64>> = Vec::new();
        for i in order {
            let (s, l) = (scores[i], labels[i]);
            match groups.last_mut() {
                Some(g) if g.score == s => {
                    g.pos += u64::from(l);
                    g.neg += u64::from(!l);
                }
                _ => groups.push(TieGroup {
                    score: s,
                    pos: u64::from(l),
                    neg: u64::from(!l),
                }),
            }
        }
        Ok(Self::from_groups(groups))
    }

    /// `bins` uniform buckets over `[0, 1]`; a group's score is its bin's
    /// lower edge. Scores must be probabilities.
    pub fn binned(scores: &[f64], labels: &[bool], bins: usize) -> Result<Self, MetricsError> {
        check_inputs(scores, labels)?;
        if bins == 0 {
            return Err(MetricsError::InvalidArgument("bin count must be positive".into()));
        }
        let mut pos = vec![0u64; bins];
        let mut neg = vec![0u64; bins];
        for (&s, &l) in scores.iter().zip(labels) {
            if !(0.0..=1.0).contains(&s) {
                return Err(MetricsError::InvalidArgument(format!("score {s} outside [0, 1]")));
            }
            let b = ((s * bins as f64) as usize).min(bins - 1);
            if l {
                pos[b] += 1;
            } else {
                neg[b] += 1;
            }
        }
        let groups = (0..bins)
            .rev()
            .filter(|&b| pos[b] + neg[b] > 0)
            .map(|b| TieGroup {
                score: b as f64 / bins as f64,
                pos: pos[b],
                neg: neg[b],
            })
            .collect();
        Ok(Self::from_groups(groups))
    }

    /// Exact up to [`EXACT_LIMIT`] scores, binned above.
    pub fn auto(scores: &[f64], labels: &[bool]) -> Result<Self, MetricsError> {
        if scores.len() > EXACT_LIMIT {
            Self::binned(scores, labels, DEFAULT_BINS)
        } else {
            Self::exact(scores, labels)
        }
    }

    fn from_groups(groups: Vec<TieGroup<f64>>) -> Self {
        let positives = groups.iter().map(|g| g.pos).sum();
        let negatives = groups.iter().map(|g| g.neg).sum();
        Self {
            groups,
            positives,
            negatives,
        }
    }

    /// ROC points from `(0, 0)` to `(1, 1)` with the trapezoidal AUC,
    /// accumulated exactly in integers.
    pub fn roc(&self) -> Result<CurveSeries, MetricsError> {
        let (p, n) = (self.positives, self.negatives);
        if p == 0 || n == 0 {
            return Err(MetricsError::DegenerateLabels { positives: p, negatives: n });
        }
        let mut points = vec![CurvePoint {
            threshold: f64::INFINITY,
            x: 0.0,
            y: 0.0,
        }];
        let (mut tp, mut fp) = (0u64, 0u64);
        // Twice the area, in units of 1/(P·N).
        let mut area2: u128 = 0;
        for g in &self.groups {
            let (tp0, fp0) = (tp, fp);
            tp += g.pos;
            fp += g.neg;
            area2 += u128::from(fp - fp0) * u128::from(tp + tp0);
            points.push(CurvePoint {
                threshold: g.score,
                x: fp as f64 / n as f64,
                y: tp as f64 / p as f64,
            });
        }
        let auc = area2 as f64 / (2.0 * p as f64 * n as f64);
        Ok(CurveSeries {
            kind: CurveKind::Roc,
            points,
            auc,
        })
    }

    /// PR points at each distinct threshold, preceded by `(0, 1)`; the AUC is
    /// step-interpolated average precision.
    pub fn pr(&self) -> Result<CurveSeries, MetricsError> {
        let p = self.positives;
        if p == 0 {
            return Err(MetricsError::NoPositives);
        }
        let mut points = vec![CurvePoint {
            threshold: f64::INFINITY,
            x: 0.0,
            y: 1.0,
        }];
        let (mut tp, mut fp) = (0u64, 0u64);
        let mut ap = 0.0;
        for g in &self.groups {
            tp += g.pos;
            fp += g.neg;
            let precision = tp as f64 / (tp + fp) as f64;
            ap += g.pos as f64 / p as f64 * precision;
            points.push(CurvePoint {
                threshold: g.score,
                x: tp as f64 / p as f64,
                y: precision,
            });
        }
        Ok(CurveSeries {
            kind: CurveKind::Pr,
            points,
            auc: ap,
        })
    }
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(MetricsError::InvalidArgument(format!("score {s}")));
    }
    Ok(())
}

pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<CurveSeries, MetricsError> {
    ScoreTable::auto(scores, labels)?.roc()
}

pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<CurveSeries, MetricsError> {
    ScoreTable::auto(scores, labels)?.pr()
}

/// Points `(r, p)` on the curve `2pr / (p + r) = f1`; recalls at or below
/// the pole `f1 / 2` are omitted.
pub fn iso_f1_points(f1: f64, recall_grid: &[f64]) -> Result<Vec<(f64, f64)>, MetricsError> {
    if !(f1 > 0.0 && f1 < 1.0) {
        return Err(MetricsError::InvalidArgument(format!("F1 level must be in (0, 1), got {f1}")));
    }
    Ok(recall_grid
        .iter()
        .filter(|&&r| r > f1 / 2.0)
        .map(|&r| (r, f1 * r / (2.0 * r - f1)))
        .collect())
}
