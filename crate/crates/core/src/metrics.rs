//! Heatmap overlap scores, detection AP and critical-object recall.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::comm::{build_mask, CommStats};
use crate::error::Result;
use crate::grid::{mask_iou, CellMask, Heatmap};
use crate::ptcm::RelevanceReport;

pub const DEFAULT_CRITICAL_THRESHOLD: f64 = 0.5;

/// `100 × IoU` of the two thresholded masks.
pub fn corr_miou(pred: &Heatmap, gt: &Heatmap, tau: f64) -> Result<f64> {
    corr_miou_masks(&build_mask(pred, tau), &build_mask(gt, tau))
}

pub fn corr_miou_masks(pred: &CellMask, gt: &CellMask) -> Result<f64> {
    Ok(100.0 * mask_iou(pred, gt)?)
}

/// Mean of [`corr_miou`] over paired frames; 0 for an empty sequence.
pub fn corr_miou_mean(pairs: &[(Heatmap, Heatmap)], tau: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, g) in pairs {
        total += corr_miou(p, g, tau)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Share of the predicted area lying outside the target area, in percent.
pub fn iou_error(pred: &Heatmap, gt: &Heatmap, tau: f64) -> Result<f64> {
    iou_error_masks(&build_mask(pred, tau), &build_mask(gt, tau))
}

pub fn iou_error_masks(pred: &CellMask, gt: &CellMask) -> Result<f64> {
    pred.check_same_spec(gt)?;
    let predicted = pred.count();
    let redundant = pred
        .cells()
        .iter()
        .zip(gt.cells())
        .filter(|(&p, &g)| p && !g)
        .count();
    Ok(100.0 * redundant as f64 / predicted.max(1) as f64)
}

/// A detection reduced to what AP needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedDetection {
    pub confidence: f64,
    pub matched: bool,
}

/// 11-point interpolated average precision.
///
/// Detections are ranked by descending confidence (stable for ties). The
/// interpolated precision at recall level `r ∈ {0, 0.1, …, 1}` is the highest
/// precision reached at any rank whose recall is at least `r`, or 0 if none.
/// With no ground truth the result is 1 when there are no detections and 0
/// otherwise.
pub fn average_precision(detections: &[RankedDetection], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if detections.is_empty() { 1.0 } else { 0.0 };
    }
    let mut ranked = detections.to_vec();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut tp = 0usize;
    let curve: Vec<(f64, f64)> = ranked
        .iter()
        .enumerate()
        .map(|(i, d)| {
            tp += d.matched as usize;
            (tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect();
    let total: f64 = (0..=10)
        .map(|k| {
            let level = k as f64 / 10.0;
            curve
                .iter()
                .filter(|(recall, _)| *recall >= level - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum();
    total / 11.0
}

/// Critical agents (relevance ≥ threshold) and how many of them were matched.
pub fn critical_counts(
    matched: &BTreeSet<u32>,
    relevances: &[RelevanceReport],
    threshold: f64,
) -> (usize, usize) {
    let critical: Vec<u32> = relevances
        .iter()
        .filter(|r| r.relevance >= threshold)
        .map(|r| r.target_id)
        .collect();
    let hit = critical.iter().filter(|id| matched.contains(id)).count();
    (critical.len(), hit)
}

/// Fraction of critical agents matched by some detection; 1 when none are critical.
pub fn critical_recall(
    matched: &BTreeSet<u32>,
    relevances: &[RelevanceReport],
    threshold: f64,
) -> f64 {
    let (n, hit) = critical_counts(matched, relevances, threshold);
    recall_ratio(hit, n)
}

pub(crate) fn recall_ratio(hit: usize, n: usize) -> f64 {
    if n == 0 {
        1.0
    } else {
        hit as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub scenario: usize,
    pub frame: usize,
    pub corr_miou: f64,
    pub iou_error: f64,
    pub detections: usize,
    pub matched: usize,
    pub gt_agents: usize,
    pub critical: usize,
    pub critical_matched: usize,
    pub comm: CommStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corr_miou: f64,
    pub iou_error: f64,
    pub ap: f64,
    pub critical_recall: f64,
    pub comm: CommStats,
    pub frames: Vec<FrameReport>,
}

impl EvalReport {
    /// Critical recall restricted to one scenario of the suite.
    pub fn scenario_critical_recall(&self, scenario: usize) -> f64 {
        let (n, hit) = self
            .frames
            .iter()
            .filter(|f| f.scenario == scenario)
            .fold((0, 0), |(n, h), f| (n + f.critical, h + f.critical_matched));
        recall_ratio(hit, n)
    }

    pub fn scenario_count(&self) -> usize {
        self.frames
            .iter()
            .map(|f| f.scenario + 1)
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use proptest::prelude::*;

    fn spec() -> GridSpec {
        GridSpec::new(0.0, 10.0, 0.0, 10.0, 1.0).unwrap()
    }

    fn mask(cells: impl IntoIterator<Item = usize>) -> CellMask {
        let mut m = CellMask::filled(spec(), false);
        for i in cells {
            m.set(spec().cell_at(i), true);
        }
        m
    }

    #[test]
    fn miou_fixtures() {
        let h = Heatmap::from_fn(spec(), |c| (c.row + c.col) as f64 / 18.0);
        assert_eq!(corr_miou(&h, &h, 0.3).unwrap(), 100.0);
        assert_eq!(corr_miou_masks(&mask(0..10), &mask(10..20)).unwrap(), 0.0);
        // 16 + 16 cells sharing 8: union 24
        let v = corr_miou_masks(&mask(0..16), &mask(8..24)).unwrap();
        assert!((v - 100.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn iou_error_fixtures() {
        assert_eq!(iou_error_masks(&mask(0..5), &mask(0..10)).unwrap(), 0.0);
        assert_eq!(iou_error_masks(&mask(0..5), &mask(50..60)).unwrap(), 100.0);
        // 20 predicted, 15 inside the target
        assert_eq!(iou_error_masks(&mask(0..20), &mask(5..40)).unwrap(), 25.0);
        assert_eq!(iou_error_masks(&mask([]), &mask(0..3)).unwrap(), 0.0);
    }

    fn d(confidence: f64, matched: bool) -> RankedDetection {
        RankedDetection {
            confidence,
            matched,
        }
    }

    #[test]
    fn ap_fixtures() {
        assert_eq!(average_precision(&[d(0.9, true)], 1), 1.0);
        assert_eq!(average_precision(&[], 2), 0.0);
        assert_eq!(average_precision(&[d(0.9, true), d(0.5, false)], 1), 1.0);
        // the match arrives at rank 2 with precision 1/2, the best precision at any recall level
        assert_eq!(average_precision(&[d(0.9, false), d(0.5, true)], 1), 0.5);
        assert_eq!(average_precision(&[], 0), 1.0);
        assert_eq!(average_precision(&[d(0.2, false)], 0), 0.0);
    }

    #[test]
    fn ap_partial_recall() {
        // recall reaches 0.5 at precision 1; levels 0..=0.5 score 1, the rest 0
        assert!((average_precision(&[d(1.0, true)], 2) - 6.0 / 11.0).abs() < 1e-12);
    }

    fn rel(id: u32, relevance: f64) -> RelevanceReport {
        RelevanceReport {
            target_id: id,
            t_s: relevance,
            r_s: 0.0,
            relevance,
        }
    }

    #[test]
    fn critical_recall_fixtures() {
        let rels = [rel(1, 0.9), rel(2, 0.6), rel(3, 0.5), rel(4, 0.1)];
        let all: BTreeSet<u32> = [1, 2, 3].into();
        assert_eq!(critical_recall(&all, &rels, 0.5), 1.0);
        assert_eq!(critical_recall(&[4].into(), &rels, 0.5), 0.0);
        let two: BTreeSet<u32> = [1, 3, 4].into();
        assert!((critical_recall(&two, &rels, 0.5) - 2.0 / 3.0).abs() < 1e-4);
        assert_eq!(critical_recall(&BTreeSet::new(), &[rel(1, 0.2)], 0.5), 1.0);
    }

    #[test]
    fn report_per_scenario() {
        let f = |scenario, critical, critical_matched| FrameReport {
            scenario,
            frame: 0,
            corr_miou: 0.0,
            iou_error: 0.0,
            detections: 0,
            matched: 0,
            gt_agents: 0,
            critical,
            critical_matched,
            comm: CommStats::default(),
        };
        let r = EvalReport {
            corr_miou: 0.0,
            iou_error: 0.0,
            ap: 0.0,
            critical_recall: 0.0,
            comm: CommStats::default(),
            frames: vec![f(0, 2, 1), f(0, 2, 2), f(1, 0, 0)],
        };
        assert_eq!(r.scenario_count(), 2);
        assert_eq!(r.scenario_critical_recall(0), 0.75);
        assert_eq!(r.scenario_critical_recall(1), 1.0);
    }

    proptest! {
        #[test]
        fn self_miou_is_full(seed in 0u64..1000, tau in 0.0f64..1.0) {
            let h = Heatmap::from_fn(spec(), |c| ((c.row * 31 + c.col * 17 + seed as usize) % 97) as f64 / 96.0);
            prop_assert_eq!(corr_miou(&h, &h, tau).unwrap(), 100.0);
        }

        #[test]
        fn ap_rank_only(flags in proptest::collection::vec(any::<bool>(), 1..20), n_extra in 0usize..5) {
            let n_gt = flags.iter().filter(|&&m| m).count() + n_extra;
            let base: Vec<_> = flags.iter().enumerate().map(|(i, &m)| d(1.0 - i as f64 / 40.0, m)).collect();
            let squashed: Vec<_> = base.iter().map(|x| d(x.confidence.powi(3) * 5.0 - 2.0, x.matched)).collect();
            prop_assert_eq!(average_precision(&base, n_gt), average_precision(&squashed, n_gt));
        }

        #[test]
        fn recall_grows_with_matches(extra in proptest::collection::btree_set(0u32..10, 0..10)) {
            let rels: Vec<_> = (0..10).map(|i| rel(i, i as f64 / 9.0)).collect();
            let base: BTreeSet<u32> = [7].into();
            let mut more = base.clone();
            more.extend(extra);
            prop_assert!(critical_recall(&more, &rels, 0.5) >= critical_recall(&base, &rels, 0.5));
        }
    }
}
