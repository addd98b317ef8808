//! Moment retrieval and highlight detection metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::MomentSpan;

/// Saliency label at or above which a clip counts as a highlight.
pub const HIGHLIGHT_LABEL: i8 = 3;

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPredictions {
    pub qid: String,
    /// `(span, score)` sorted by descending score.
    pub moments: Vec<(MomentSpan, f64)>,
}

impl RankedPredictions {
    /// Sorts by descending score; equal scores keep their input order.
    pub fn new(qid: impl Into<String>, mut moments: Vec<(MomentSpan, f64)>) -> Self {
        moments.sort_by(|a, b| b.1.total_cmp(&a.1));
        Self { qid: qid.into(), moments }
    }

    pub fn top(&self) -> Option<&MomentSpan> {
        self.moments.first().map(|m| &m.0)
    }
}

pub fn iou_1d(a: &MomentSpan, b: &MomentSpan) -> f64 {
    let inter = (a.end().min(b.end()) - a.start().max(b.start())).max(0.0);
    let union = a.span + b.span - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn best_iou(p: &MomentSpan, gts: &[MomentSpan]) -> f64 {
    gts.iter().map(|g| iou_1d(p, g)).fold(0.0, f64::max)
}

fn check_lengths(preds: &[RankedPredictions], gts: &[Vec<MomentSpan>]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} prediction lists for {} queries", preds.len(), gts.len())));
    }
    Ok(())
}

pub fn recall_at_1(preds: &[RankedPredictions], gts: &[Vec<MomentSpan>], threshold: f64) -> Result<f64> {
    check_lengths(preds, gts)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| p.top().is_some_and(|t| best_iou(t, g) >= threshold))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn mean_iou(preds: &[RankedPredictions], gts: &[Vec<MomentSpan>]) -> Result<f64> {
    check_lengths(preds, gts)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = preds.iter().zip(gts).map(|(p, g)| p.top().map_or(0.0, |t| best_iou(t, g))).sum();
    Ok(total / preds.len() as f64)
}

/// Average precision of one query at one IoU threshold. Predictions are
/// taken in score order; each claims the unclaimed moment of highest IoU
/// when that IoU reaches the threshold. The precision-recall curve is made
/// monotone before integration.
pub fn average_precision(pred: &RankedPredictions, gts: &[MomentSpan], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut claimed = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(pred.moments.len());
    let mut recall = Vec::with_capacity(pred.moments.len());
    for (k, (p, _)) in pred.moments.iter().enumerate() {
        let mut order: Vec<usize> = (0..gts.len()).collect();
        order.sort_by(|&a, &b| iou_1d(p, &gts[b]).total_cmp(&iou_1d(p, &gts[a])).then(a.cmp(&b)));
        if let Some(&g) = order.iter().find(|&&g| !claimed[g] && iou_1d(p, &gts[g]) >= threshold) {
            claimed[g] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    interpolated_area(&precision, &recall)
}

/// Area under the upper envelope of a precision-recall curve.
fn interpolated_area(precision: &[f64], recall: &[f64]) -> f64 {
    let mut p: Vec<f64> = std::iter::once(0.0).chain(precision.iter().copied()).chain(std::iter::once(0.0)).collect();
    let r: Vec<f64> = std::iter::once(0.0).chain(recall.iter().copied()).chain(std::iter::once(1.0)).collect();
    for i in (0..p.len() - 1).rev() {
        p[i] = p[i].max(p[i + 1]);
    }
    (1..r.len()).map(|i| (r[i] - r[i - 1]) * p[i]).sum()
}

/// Per-threshold AP (keyed `"0.50"` etc.) averaged over queries, and the
/// average over thresholds.
pub fn map_over_thresholds(preds: &[RankedPredictions], gts: &[Vec<MomentSpan>]) -> Result<(BTreeMap<String, f64>, f64)> {
    check_lengths(preds, gts)?;
    let mut per = BTreeMap::new();
    let mut sum = 0.0;
    let thresholds = map_thresholds();
    for &t in &thresholds {
        let ap = if preds.is_empty() {
            0.0
        } else {
            preds.iter().zip(gts).map(|(p, g)| average_precision(p, g, t)).sum::<f64>() / preds.len() as f64
        };
        per.insert(format!("{t:.2}"), ap);
        sum += ap;
    }
    Ok((per, sum / thresholds.len() as f64))
}

/// Non-interpolated AP of one clip ranking against binary relevance.
/// `None` when no clip is relevant.
pub fn ranking_ap(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(acc / total as f64)
}

/// Top-scored clip index, ties to the lower index.
pub fn top_clip(scores: &[f64]) -> Option<usize> {
    (0..scores.len()).reduce(|best, i| if scores[i] > scores[best] { i } else { best })
}

/// `(hd_map, hit_at_1)`. Clips labelled `-1` stay in the ranking as
/// non-highlights; queries without any highlight are left out of the map.
pub fn hd_metrics(scores: &[Vec<f64>], labels: &[Vec<i8>]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() || scores.iter().zip(labels).any(|(s, l)| s.len() != l.len()) {
        return Err(Error::Shape("scores and labels disagree in shape".into()));
    }
    if scores.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut ap_sum = 0.0;
    let mut ap_count = 0usize;
    let mut hits = 0usize;
    for (s, l) in scores.iter().zip(labels) {
        let relevant: Vec<bool> = l.iter().map(|&x| x >= HIGHLIGHT_LABEL).collect();
        if let Some(ap) = ranking_ap(s, &relevant) {
            ap_sum += ap;
            ap_count += 1;
        }
        if top_clip(s).is_some_and(|i| relevant[i]) {
            hits += 1;
        }
    }
    let hd_map = if ap_count == 0 { 0.0 } else { ap_sum / ap_count as f64 };
    Ok((hd_map, hits as f64 / scores.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r1_at_050: f64,
    pub r1_at_070: f64,
    pub map_at: BTreeMap<String, f64>,
    pub map_avg: f64,
    pub hd_map: f64,
    pub hit_at_1: f64,
    pub mean_iou: f64,
    pub num_queries: usize,
}

impl MetricsReport {
    pub fn compute(preds: &[RankedPredictions], gts: &[Vec<MomentSpan>], scores: &[Vec<f64>], labels: &[Vec<i8>]) -> Result<Self> {
        let (map_at, map_avg) = map_over_thresholds(preds, gts)?;
        let (hd_map, hit_at_1) = hd_metrics(scores, labels)?;
        Ok(Self {
            r1_at_050: recall_at_1(preds, gts, 0.5)?,
            r1_at_070: recall_at_1(preds, gts, 0.7)?,
            map_at,
            map_avg,
            hd_map,
            hit_at_1,
            mean_iou: mean_iou(preds, gts)?,
            num_queries: preds.len(),
        })
    }
}

/// One CSV row of per-query results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub qid: String,
    pub top1_iou: f64,
    pub map_avg: f64,
    pub hd_ap: Option<f64>,
    pub hit_at_1: bool,
}

impl QueryMetrics {
    pub fn compute(pred: &RankedPredictions, gts: &[MomentSpan], scores: &[f64], labels: &[i8]) -> Self {
        let relevant: Vec<bool> = labels.iter().map(|&x| x >= HIGHLIGHT_LABEL).collect();
        let thresholds = map_thresholds();
        Self {
            qid: pred.qid.clone(),
            top1_iou: pred.top().map_or(0.0, |t| best_iou(t, gts)),
            map_avg: thresholds.iter().map(|&t| average_precision(pred, gts, t)).sum::<f64>() / thresholds.len() as f64,
            hd_ap: ranking_ap(scores, &relevant),
            hit_at_1: top_clip(scores).is_some_and(|i| relevant[i]),
        }
    }

    pub const CSV_HEADER: &'static str = "qid,top1_iou,map_avg,hd_ap,hit_at_1";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{}",
            self.qid,
            self.top1_iou,
            self.map_avg,
            self.hd_ap.map_or(String::new(), |v| format!("{v:.6}")),
            u8::from(self.hit_at_1)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn se(a: f64, b: f64) -> MomentSpan {
        MomentSpan::from_start_end(a, b).unwrap()
    }

    fn ranked(m: Vec<(MomentSpan, f64)>) -> RankedPredictions {
        RankedPredictions::new("q", m)
    }

    #[test]
    fn iou_examples() {
        assert!((iou_1d(&se(0.2, 0.4), &se(0.2, 0.4)) - 1.0).abs() < 1e-12);
        assert_eq!(iou_1d(&se(0.0, 0.2), &se(0.5, 0.7)), 0.0);
        assert!((iou_1d(&se(0.2, 0.4), &se(0.3, 0.5)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn recall_examples() {
        // IoU of [0, 0.6] with [0, 1.0] is 0.6.
        let g = vec![vec![se(0.0, 1.0)]];
        let p = vec![ranked(vec![(se(0.0, 0.6), 1.0)])];
        assert_eq!(recall_at_1(&p, &g, 0.5).unwrap(), 1.0);
        assert_eq!(recall_at_1(&p, &g, 0.7).unwrap(), 0.0);
        let g3 = vec![vec![se(0.0, 0.2)], vec![se(0.0, 0.2)], vec![se(0.0, 0.2)]];
        let p3 = vec![
            ranked(vec![(se(0.0, 0.2), 1.0)]),
            ranked(vec![(se(0.6, 0.8), 1.0)]),
            ranked(vec![(se(0.0, 0.2), 1.0)]),
        ];
        assert!((recall_at_1(&p3, &g3, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn map_examples() {
        let g = vec![vec![se(0.2, 0.4)]];
        let (per, avg) = map_over_thresholds(&[ranked(vec![(se(0.2, 0.4), 0.9)])], &g).unwrap();
        assert_eq!(per.len(), 10);
        assert!(per.values().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!((avg - 1.0).abs() < 1e-12);
        let (_, avg) = map_over_thresholds(&[ranked(vec![(se(0.6, 0.8), 0.9), (se(0.0, 0.1), 0.5)])], &g).unwrap();
        assert_eq!(avg, 0.0);
    }

    #[test]
    fn ap_with_false_positive_first() {
        // fp then tp: precision [0, 1/2], recall [0, 1] -> 0.5
        let g = [se(0.2, 0.4)];
        let p = ranked(vec![(se(0.7, 0.9), 0.9), (se(0.2, 0.4), 0.5)]);
        assert!((average_precision(&p, &g, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hd_examples() {
        let labels = vec![vec![0i8, 4, 1, -1]];
        let (_, hit) = hd_metrics(&[vec![0.1, 0.9, 0.2, 0.0]], &labels).unwrap();
        assert_eq!(hit, 1.0);
        let labels = vec![vec![0i8, 4, 3, 1, 2, 3]];
        let scores: Vec<Vec<f64>> = labels.iter().map(|l| l.iter().map(|&x| x as f64).collect()).collect();
        assert_eq!(hd_metrics(&scores, &labels).unwrap().0, 1.0);
        // Ranking 0,1,2,...: relevant at ranks 2,3,6 -> (1/2 + 2/3 + 3/6)/3.
        let scores = vec![vec![6.0, 5.0, 4.0, 3.0, 2.0, 1.0]];
        let expect = (0.5 + 2.0 / 3.0 + 0.5) / 3.0;
        assert!((hd_metrics(&scores, &labels).unwrap().0 - expect).abs() < 1e-12);
    }

    #[test]
    fn mean_iou_examples() {
        let g = vec![vec![se(0.2, 0.4)], vec![se(0.2, 0.4)]];
        let p = vec![ranked(vec![(se(0.2, 0.4), 1.0)]), ranked(vec![(se(0.3, 0.5), 1.0)])];
        assert!((mean_iou(&p, &g).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(mean_iou(&[ranked(vec![(se(0.6, 0.8), 1.0)])], &g[..1]).unwrap(), 0.0);
    }

    #[test]
    fn csv_row_format() {
        let q = QueryMetrics {
            qid: "a".into(),
            top1_iou: 0.5,
            map_avg: 0.25,
            hd_ap: None,
            hit_at_1: true,
        };
        assert_eq!(q.csv_row(), "a,0.500000,0.250000,,1");
    }

    proptest! {
        #[test]
        fn metrics_depend_on_rank_only(
            raw in proptest::collection::vec((0.0f64..0.8, 0.05f64..0.2, -3.0f64..3.0), 1..5),
            scale in 0.1f64..10.0,
            labels in proptest::collection::vec(-1i8..=4, 6),
            clip_scores in proptest::collection::vec(-3.0f64..3.0, 6),
        ) {
            let g = vec![vec![se(0.3, 0.5)]];
            let moments: Vec<_> = raw.iter().map(|&(a, l, s)| (se(a, a + l), s)).collect();
            let scaled: Vec<_> = moments.iter().map(|&(m, s)| (m, s * scale)).collect();
            let a = MetricsReport::compute(&[ranked(moments)], &g, &[clip_scores.clone()], &[labels.clone()]).unwrap();
            let sc: Vec<f64> = clip_scores.iter().map(|s| s * scale).collect();
            let b = MetricsReport::compute(&[ranked(scaled)], &g, &[sc], &[labels]).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn ap_non_increasing_in_threshold(raw in proptest::collection::vec((0.0f64..0.8, 0.05f64..0.2, -3.0f64..3.0), 1..5)) {
            let g = [se(0.3, 0.5), se(0.6, 0.7)];
            let p = ranked(raw.iter().map(|&(a, l, s)| (se(a, a + l), s)).collect());
            let aps: Vec<f64> = map_thresholds().iter().map(|&t| average_precision(&p, &g, t)).collect();
            for w in aps.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }
}
