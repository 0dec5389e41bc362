//! Fusion of received blocks into the ego grid, connected-component detection
//! and greedy box matching.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::comm::FeatureBlockSet;
use crate::error::Result;
use crate::geometry::{Point2, Rect};
use crate::grid::{CellIndex, GridSpec, OccupancyGrid};
use crate::scenario::Scenario;
use crate::sensing::SensorView;

pub const DEFAULT_MIN_CELLS: usize = 3;
pub const DEFAULT_MIN_COUNT: u32 = 1;
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

/// Absorbs rounding in grid-aligned rectangles whose exact IoU equals the threshold.
const IOU_SLACK: f64 = 1e-9;

/// Cellwise maximum of the ego occupancy and every received payload.
pub fn fuse(ego: &SensorView, received: &FeatureBlockSet) -> Result<OccupancyGrid> {
    fuse_grid(&ego.occupancy, received)
}

pub fn fuse_grid(ego: &OccupancyGrid, received: &FeatureBlockSet) -> Result<OccupancyGrid> {
    ego.check_same_spec(&OccupancyGrid::filled(received.source_spec, 0))?;
    let mut out = ego.clone();
    for block in &received.blocks {
        for (c, v) in received.cells_of(block) {
            let cell = out.get_mut(c);
            *cell = (*cell).max(v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub center: Point2,
    /// Half widths along x and y, in meters.
    pub half_extent: (f64, f64),
    /// Component evidence relative to the strongest component.
    pub confidence: f64,
    pub matched_gt: Option<u32>,
    /// First cell of the component in row-major order.
    pub seed: CellIndex,
    pub cells: usize,
    pub evidence: u64,
}

impl DetectionBox {
    pub fn rect(&self) -> Rect {
        let (hx, hy) = self.half_extent;
        Rect::new(
            self.center.x - hx,
            self.center.y - hy,
            self.center.x + hx,
            self.center.y + hy,
        )
    }
}

/// 4-connected components of cells with occupancy ≥ `min_count`; components of
/// at least `min_cells` cells become tight boxes, ordered by descending
/// confidence then seed cell.
pub fn detect(fused: &OccupancyGrid, min_cells: usize, min_count: u32) -> Vec<DetectionBox> {
    let spec = *fused.spec();
    let (rows, cols) = (fused.rows(), fused.cols());
    let on = |i: usize| fused.cells()[i] >= min_count.max(1);
    let mut seen = vec![false; rows * cols];
    let mut found = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..rows * cols {
        if seen[start] || !on(start) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut r0, mut r1, mut c0, mut c1) = (rows, 0, cols, 0);
        let (mut n, mut evidence) = (0usize, 0u64);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / cols, i % cols);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
            n += 1;
            evidence += fused.cells()[i] as u64;
            let mut visit = |j: usize| {
                if !seen[j] && on(j) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - cols);
            }
            if r + 1 < rows {
                visit(i + cols);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < cols {
                visit(i + 1);
            }
        }
        if n >= min_cells {
            let rect = spec.cells_rect(r0, c0, r1, c1);
            found.push(DetectionBox {
                center: rect.center(),
                half_extent: (
                    0.5 * (rect.x_max - rect.x_min),
                    0.5 * (rect.y_max - rect.y_min),
                ),
                confidence: 0.0,
                matched_gt: None,
                seed: spec.cell_at(start),
                cells: n,
                evidence,
            });
        }
    }
    let max_ev = found.iter().map(|d| d.evidence).max().unwrap_or(0);
    for d in &mut found {
        d.confidence = if max_ev == 0 {
            0.0
        } else {
            d.evidence as f64 / max_ev as f64
        };
    }
    found.sort_by(|a, b| {
        b.evidence
            .cmp(&a.evidence)
            .then((a.seed.row, a.seed.col).cmp(&(b.seed.row, b.seed.col)))
    });
    found
}

/// A ground-truth agent box on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub agent_id: u32,
    pub rect: Rect,
}

/// Bounding rectangle of each non-ego agent's rasterized footprint at `frame`.
/// Agents with no footprint cell on the grid are omitted.
pub fn gt_boxes(scenario: &Scenario, frame: usize, spec: &GridSpec) -> Vec<GtBox> {
    scenario
        .others()
        .filter_map(|a| {
            let cells = spec.rasterize_box(&a.footprint_at(frame)?);
            let r0 = cells.iter().map(|c| c.row).min()?;
            let r1 = cells.iter().map(|c| c.row).max()?;
            let c0 = cells.iter().map(|c| c.col).min()?;
            let c1 = cells.iter().map(|c| c.col).max()?;
            Some(GtBox {
                agent_id: a.id,
                rect: spec.cells_rect(r0, c0, r1, c1),
            })
        })
        .collect()
}

/// Greedy assignment in descending confidence: each box takes the free GT with
/// the highest IoU, provided it reaches `iou_threshold`. Boxes are returned in
/// the order visited with `matched_gt` filled in.
pub fn match_detections(
    boxes: &[DetectionBox],
    gt: &[GtBox],
    iou_threshold: f64,
) -> Vec<DetectionBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].confidence.total_cmp(&boxes[a].confidence));
    let mut taken = vec![false; gt.len()];
    order
        .into_iter()
        .map(|i| {
            let mut d = boxes[i];
            let rect = d.rect();
            let best = gt
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*j])
                .map(|(j, g)| (j, rect.iou(&g.rect)))
                .filter(|&(_, iou)| iou >= iou_threshold - IOU_SLACK)
                .fold(None::<(usize, f64)>, |acc, cand| match acc {
                    Some(a) if a.1 >= cand.1 => Some(a),
                    _ => Some(cand),
                });
            d.matched_gt = best.map(|(j, _)| {
                taken[j] = true;
                gt[j].agent_id
            });
            d
        })
        .collect()
}

pub const DETECTIONS_CSV_HEADER: &str = "frame,center_x,center_y,ext_x,ext_y,confidence,matched_gt";

pub fn write_detections_csv(
    mut w: impl Write,
    frame: usize,
    boxes: &[DetectionBox],
) -> std::io::Result<()> {
    for b in boxes {
        let matched = b.matched_gt.map(|id| id.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{frame},{:.3},{:.3},{:.3},{:.3},{:.6},{matched}",
            b.center.x, b.center.y, b.half_extent.0, b.half_extent.1, b.confidence
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::blockify;
    use crate::grid::{CellMask, Grid};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> GridSpec {
        GridSpec::default()
    }

    fn view(occ: OccupancyGrid) -> SensorView {
        SensorView {
            visible: occ.map(|_| true),
            occupancy: occ,
            sensor_pose: Point2::zero(),
        }
    }

    fn blob(grid: &mut OccupancyGrid, r0: usize, c0: usize, h: usize, w: usize, v: u32) {
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                grid.set(CellIndex::new(r, c), v);
            }
        }
    }

    #[test]
    fn fusion_identity_and_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ego = Grid::from_fn(spec(), |_| rng.random_range(0..3u32));
        let infra = Grid::from_fn(spec(), |_| rng.random_range(0..3u32));
        let empty = blockify(&CellMask::filled(spec(), false), &infra, 4).unwrap();
        assert_eq!(fuse(&view(ego.clone()), &empty).unwrap(), ego);
        let full = blockify(&CellMask::filled(spec(), true), &infra, 4).unwrap();
        let fused = fuse(&view(ego.clone()), &full).unwrap();
        for i in 0..ego.len() {
            assert_eq!(fused.cells()[i], ego.cells()[i].max(infra.cells()[i]));
        }
    }

    #[test]
    fn fusion_spec_mismatch() {
        let small = GridSpec::centered(12.8, 0.8).unwrap();
        let ego = OccupancyGrid::filled(spec(), 0);
        let set = blockify(
            &CellMask::filled(small, true),
            &OccupancyGrid::filled(small, 1),
            4,
        )
        .unwrap();
        assert!(fuse(&view(ego), &set).is_err());
    }

    #[test]
    fn detect_examples() {
        assert!(detect(&OccupancyGrid::filled(spec(), 0), 3, 1).is_empty());
        let mut g = OccupancyGrid::filled(spec(), 0);
        blob(&mut g, 10, 10, 3, 3, 1);
        let d = detect(&g, 2, 1);
        assert_eq!(d.len(), 1);
        assert!((d[0].half_extent.0 - 1.2).abs() < 1e-9 && (d[0].half_extent.1 - 1.2).abs() < 1e-9);
        assert_eq!(d[0].confidence, 1.0);

        blob(&mut g, 10, 14, 3, 3, 2);
        let d = detect(&g, 2, 1);
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].seed, CellIndex::new(10, 14));
        assert_eq!(d[1].confidence, 0.5);
    }

    #[test]
    fn detect_thresholds() {
        let mut g = OccupancyGrid::filled(spec(), 0);
        blob(&mut g, 5, 5, 1, 2, 3);
        blob(&mut g, 20, 20, 2, 2, 1);
        assert_eq!(detect(&g, 3, 1).len(), 1);
        assert_eq!(detect(&g, 2, 2).len(), 1);
        // diagonal neighbours are separate components
        let mut d = OccupancyGrid::filled(spec(), 0);
        d.set(CellIndex::new(1, 1), 1);
        d.set(CellIndex::new(2, 2), 1);
        assert_eq!(detect(&d, 1, 1).len(), 2);
    }

    fn gt(id: u32, r: Rect) -> GtBox {
        GtBox {
            agent_id: id,
            rect: r,
        }
    }

    fn det(rect: Rect, confidence: f64) -> DetectionBox {
        DetectionBox {
            center: rect.center(),
            half_extent: (
                0.5 * (rect.x_max - rect.x_min),
                0.5 * (rect.y_max - rect.y_min),
            ),
            confidence,
            matched_gt: None,
            seed: CellIndex::new(0, 0),
            cells: 1,
            evidence: 1,
        }
    }

    #[test]
    fn matching_examples() {
        let r = Rect::new(0.0, 0.0, 4.0, 2.0);
        let m = match_detections(&[det(r, 1.0)], &[gt(7, r)], 0.5);
        assert_eq!(m[0].matched_gt, Some(7));

        // IoU 0.3: overlap 3 of union 10
        let a = Rect::new(0.0, 0.0, 6.5, 1.0);
        let b = Rect::new(3.5, 0.0, 10.0, 1.0);
        assert!((a.iou(&b) - 3.0 / 10.0).abs() < 1e-12);
        assert_eq!(
            match_detections(&[det(a, 1.0)], &[gt(1, b)], 0.5)[0].matched_gt,
            None
        );

        let m = match_detections(&[det(r, 0.4), det(r, 0.9)], &[gt(3, r)], 0.5);
        assert_eq!(m[0].confidence, 0.9);
        assert_eq!(m[0].matched_gt, Some(3));
        assert_eq!(m[1].matched_gt, None);

        // exact IoU 1/2 computed from grid coordinates that do not round cleanly
        let g = Rect::new(4.8, -4.0, 6.4, 0.8);
        let half = Rect::new(5.6, -4.0, 6.4, 0.8);
        assert_eq!(
            match_detections(&[det(half, 1.0)], &[gt(2, g)], 0.5)[0].matched_gt,
            Some(2)
        );
    }

    #[test]
    fn csv_rows() {
        let mut out = Vec::new();
        let mut d = det(Rect::new(0.0, 0.0, 2.0, 1.0), 0.5);
        d.matched_gt = Some(4);
        write_detections_csv(&mut out, 3, &[d, det(Rect::new(0.0, 0.0, 2.0, 2.0), 1.0)]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "3,1.000,0.500,1.000,0.500,0.500000,4\n3,1.000,1.000,1.000,1.000,1.000000,\n"
        );
    }

    /// Union-find labeling in reverse scan order as an independent oracle.
    fn components_by_union_find(g: &OccupancyGrid) -> Vec<Vec<usize>> {
        let (rows, cols) = (g.rows(), g.cols());
        let mut parent: Vec<usize> = (0..rows * cols).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for i in (0..rows * cols).rev() {
            if g.cells()[i] == 0 {
                continue;
            }
            let (r, c) = (i / cols, i % cols);
            for j in [(r > 0).then(|| i - cols), (c > 0).then(|| i - 1)]
                .into_iter()
                .flatten()
            {
                if g.cells()[j] > 0 {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..rows * cols {
            if g.cells()[i] > 0 {
                let root = find(&mut parent, i);
                groups.entry(root).or_default().push(i);
            }
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        out.sort();
        out
    }

    proptest! {
        #[test]
        fn components_match_oracle(seed in 0u64..500) {
            let small = GridSpec::centered(8.0, 0.8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Grid::from_fn(small, |_| if rng.random::<f64>() < 0.35 { 1 } else { 0 });
            let oracle = components_by_union_find(&g);
            let found = detect(&g, 1, 1);
            prop_assert_eq!(found.len(), oracle.len());
            let mut seeds: Vec<usize> = found.iter().map(|d| small.index(d.seed)).collect();
            seeds.sort();
            let mut firsts: Vec<usize> = oracle.iter().map(|c| c[0]).collect();
            firsts.sort();
            prop_assert_eq!(seeds, firsts);
            let total: usize = found.iter().map(|d| d.cells).sum();
            prop_assert_eq!(total, oracle.iter().map(|c| c.len()).sum::<usize>());
        }

        #[test]
        fn masked_fusion_is_local(seed in 0u64..200, density in 0.0f64..0.1) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ego = Grid::from_fn(spec(), |_| rng.random_range(0..2u32));
            let infra = Grid::from_fn(spec(), |_| rng.random_range(0..4u32));
            let mask = CellMask::from_fn(spec(), |_| rng.random::<f64>() < density);
            let set = blockify(&mask, &infra, 4).unwrap();
            let fused = fuse(&view(ego.clone()), &set).unwrap();
            let cover = set.coverage();
            for i in 0..ego.len() {
                if !cover.cells()[i] {
                    prop_assert_eq!(fused.cells()[i], ego.cells()[i]);
                }
            }
        }
    }
}
