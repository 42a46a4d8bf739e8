//! Desk-scale detection metrics: greedy IoU matching at a fixed threshold.

use crate::data::TargetBox;
use crate::decode::DecodedBox;

pub fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.2 - a.0).max(0.0) * (a.3 - a.1).max(0.0);
    let area_b = (b.2 - b.0).max(0.0) * (b.3 - b.1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Score-descending greedy suppression of same-class overlaps.
pub fn simple_nms(mut boxes: Vec<DecodedBox>, iou_threshold: f64) -> Vec<DecodedBox> {
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<DecodedBox> = Vec::new();
    for b in boxes {
        let suppressed = keep.iter().any(|k| {
            k.class_id == b.class_id
                && iou((k.x1, k.y1, k.x2, k.y2), (b.x1, b.y1, b.x2, b.y2)) > iou_threshold
        });
        if !suppressed {
            keep.push(b);
        }
    }
    keep
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DetMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl DetMetrics {
    pub fn precision(&self) -> f64 {
        let denom = self.true_positives + self.false_positives;
        if denom == 0 {
            0.0
        } else {
            self.true_positives as f64 / denom as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let denom = self.true_positives + self.false_negatives;
        if denom == 0 {
            0.0
        } else {
            self.true_positives as f64 / denom as f64
        }
    }
}

/// Greedy matching: predictions in score order claim the best unmatched
/// same-class target with IoU at or above the threshold.
pub fn match_image(
    predictions: &[DecodedBox],
    targets: &[TargetBox],
    iou_threshold: f64,
) -> DetMetrics {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&i, &j| predictions[j].score.total_cmp(&predictions[i].score));
    let mut claimed = vec![false; targets.len()];
    let mut m = DetMetrics::default();
    for pi in order {
        let p = &predictions[pi];
        let mut best: Option<(usize, f64)> = None;
        for (ti, t) in targets.iter().enumerate() {
            if claimed[ti] || t.class_id != p.class_id {
                continue;
            }
            let v = iou((p.x1, p.y1, p.x2, p.y2), (t.x1, t.y1, t.x2, t.y2));
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((ti, v));
            }
        }
        match best {
            Some((ti, _)) => {
                claimed[ti] = true;
                m.true_positives += 1;
            }
            None => m.false_positives += 1,
        }
    }
    m.false_negatives = claimed.iter().filter(|&&c| !c).count();
    m
}

/// Accumulates matches over a set of images.
pub fn match_dataset(
    predictions: &[Vec<DecodedBox>],
    targets: &[Vec<TargetBox>],
    iou_threshold: f64,
) -> DetMetrics {
    let mut total = DetMetrics::default();
    for (p, t) in predictions.iter().zip(targets) {
        let m = match_image(p, t, iou_threshold);
        total.true_positives += m.true_positives;
        total.false_positives += m.false_positives;
        total.false_negatives += m.false_negatives;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, class_id: usize) -> DecodedBox {
        DecodedBox {
            x1,
            y1,
            x2,
            y2,
            score,
            class_id,
            objectness: score,
        }
    }

    #[test]
    fn iou_basics() {
        assert_eq!(iou((0., 0., 2., 2.), (0., 0., 2., 2.)), 1.0);
        assert_eq!(iou((0., 0., 1., 1.), (2., 2., 3., 3.)), 0.0);
        let v = iou((0., 0., 2., 2.), (1., 0., 3., 2.));
        assert!((v - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_match_counts() {
        let targets = vec![
            TargetBox { x1: 0., y1: 0., x2: 10., y2: 10., class_id: 0 },
            TargetBox { x1: 20., y1: 20., x2: 30., y2: 30., class_id: 1 },
        ];
        let preds = vec![
            boxed(0.5, 0.5, 10., 10., 0.9, 0),   // match
            boxed(21., 21., 30., 30., 0.8, 0),   // class mismatch -> FP
            boxed(50., 50., 60., 60., 0.7, 1),   // off target -> FP
        ];
        let m = match_image(&preds, &targets, 0.5);
        assert_eq!(m.true_positives, 1);
        assert_eq!(m.false_positives, 2);
        assert_eq!(m.false_negatives, 1);
        assert_eq!(m.precision(), 1.0 / 3.0);
        assert_eq!(m.recall(), 0.5);
    }

    #[test]
    fn nms_suppresses_same_class_overlaps_only() {
        let boxes = vec![
            boxed(0., 0., 10., 10., 0.9, 0),
            boxed(1., 1., 10., 10., 0.8, 0),  // overlaps class 0 -> suppressed
            boxed(1., 1., 10., 10., 0.7, 1),  // other class -> kept
        ];
        let kept = simple_nms(boxes, 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].class_id, 0);
        assert_eq!(kept[1].class_id, 1);
    }
}
