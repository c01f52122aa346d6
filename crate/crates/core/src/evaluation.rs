//! Detection-level (precision, recall, F1) and count-level scoring against annotations.

use crate::detection::Detection;
use crate::geometry::{iou, PixelBox};
use crate::merger::rank_cmp;
use crate::Scalar;

pub const DEFAULT_MATCH_IOU: f64 = 0.25;

pub const REPORT_HEADER: &str = "scene_id,tp,fp,fn,precision,recall,f1,pred_count,true_count,count_accuracy";

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult<T = f64> {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// `(prediction index, truth index, iou)` using the caller's indices.
    pub pairs: Vec<(usize, usize, T)>,
}

/// Greedy one-to-one matching.
///
/// Predictions are visited in score-descending order (coordinates break ties);
/// each claims the unclaimed truth with the highest IoU at or above
/// `iou_threshold`. Equal IoUs go to the truth with the smaller coordinates.
pub fn match_detections<T: Scalar>(
    predictions: &[Detection<T>],
    truths: &[PixelBox<T>],
    iou_threshold: T,
) -> MatchResult<T> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| rank_cmp(&predictions[a], &predictions[b]).then(a.cmp(&b)));
    let mut claimed = vec![false; truths.len()];
    let mut pairs = Vec::new();
    for p in order {
        let pb = predictions[p].bbox();
        let best = truths
            .iter()
            .enumerate()
            .filter(|(t, _)| !claimed[*t])
            .map(|(t, tb)| (t, iou(pb, tb)))
            .filter(|(_, v)| *v >= iou_threshold && *v > T::zero())
            .min_by(|(ta, va), (tb, vb)| {
                vb.total_cmp_s(va)
                    .then_with(|| truths[*ta].cmp_coords(&truths[*tb]))
                    .then(ta.cmp(tb))
            });
        if let Some((t, v)) = best {
            claimed[t] = true;
            pairs.push((p, t, v));
        }
    }
    let tp = pairs.len();
    MatchResult {
        true_positives: tp,
        false_positives: predictions.len() - tp,
        false_negatives: truths.len() - tp,
        pairs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision and recall with `0/0 = 1`; F1 with `0/0 = 0`.
pub fn prf_counts(tp: usize, fp: usize, fn_: usize) -> Prf {
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    // empty/empty gives p = r = 1 but no true positives, so F1 is 0 by convention
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

pub fn prf<T>(m: &MatchResult<T>) -> Prf {
    prf_counts(m.true_positives, m.false_positives, m.false_negatives)
}

/// `1 - |predicted - truth| / truth`, clamped at 0. With no true objects, 1 iff nothing was predicted.
pub fn count_accuracy(predicted: usize, truth: usize) -> f64 {
    if truth == 0 {
        return if predicted == 0 { 1.0 } else { 0.0 };
    }
    let err = (predicted as f64 - truth as f64).abs() / truth as f64;
    (1.0 - err).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub scene_id: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub prf: Prf,
    pub pred_count: usize,
    pub true_count: usize,
    pub count_accuracy: f64,
}

impl EvalRow {
    pub fn from_match<T>(scene_id: &str, m: &MatchResult<T>) -> Self {
        let pred_count = m.true_positives + m.false_positives;
        let true_count = m.true_positives + m.false_negatives;
        Self {
            scene_id: scene_id.to_owned(),
            tp: m.true_positives,
            fp: m.false_positives,
            fn_: m.false_negatives,
            prf: prf(m),
            pred_count,
            true_count,
            count_accuracy: count_accuracy(pred_count, true_count),
        }
    }

    /// Pooled row: counts summed over scenes, metrics recomputed from the sums.
    pub fn aggregate(scene_id: &str, rows: &[EvalRow]) -> Self {
        let (tp, fp, fn_) = rows
            .iter()
            .fold((0, 0, 0), |(a, b, c), r| (a + r.tp, b + r.fp, c + r.fn_));
        let pred_count = tp + fp;
        let true_count = tp + fn_;
        Self {
            scene_id: scene_id.to_owned(),
            tp,
            fp,
            fn_,
            prf: prf_counts(tp, fp, fn_),
            pred_count,
            true_count,
            count_accuracy: count_accuracy(pred_count, true_count),
        }
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{},{},{:.6}",
            self.scene_id,
            self.tp,
            self.fp,
            self.fn_,
            self.prf.precision,
            self.prf.recall,
            self.prf.f1,
            self.pred_count,
            self.true_count,
            self.count_accuracy
        )
    }
}

/// Mean of per-scene count accuracies; `None` for no scenes.
pub fn mean_count_accuracy(rows: &[EvalRow]) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    Some(rows.iter().map(|r| r.count_accuracy).sum::<f64>() / rows.len() as f64)
}
