//! Intent-driven area prediction: motion feature rasters, supervision heatmaps
//! and a small convolutional predictor between them.

mod predictor;

pub use predictor::{
    load_weights, predict_heatmap, read_weights, save_weights, synthetic_batch, train_from,
    train_predictor, write_weights, Predictor, TrainOptions, TrainOutcome, HIDDEN_PLANES, KERNEL,
    PARAM_COUNT, SYNTHETIC_BATCH_SIZE,
};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::{CellIndex, Grid, GridSpec, Heatmap};
use crate::ptcm::RelevanceReport;
use crate::scenario::{DrivingIntent, Scenario};

/// Number of planes in a [`MotionFeatureStack`].
pub const FEATURE_PLANES: usize = 7;

/// Per-cell motion features sharing one grid.
///
/// Offsets and flow are measured in cells; `+x` is the column direction and
/// `+y` the row direction.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFeatureStack {
    pub seg: Grid<f64>,
    pub cen: Grid<f64>,
    pub off_x: Grid<f64>,
    pub off_y: Grid<f64>,
    pub flow_x: Grid<f64>,
    pub flow_y: Grid<f64>,
    pub intent: Grid<f64>,
}

impl MotionFeatureStack {
    pub fn zeros(spec: GridSpec) -> Self {
        let z = Grid::filled(spec, 0.0);
        Self {
            seg: z.clone(),
            cen: z.clone(),
            off_x: z.clone(),
            off_y: z.clone(),
            flow_x: z.clone(),
            flow_y: z.clone(),
            intent: z,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        self.seg.spec()
    }

    /// Planes in network input order: seg, cen, off_x, off_y, flow_x, flow_y, intent.
    pub fn planes(&self) -> [&Grid<f64>; FEATURE_PLANES] {
        [
            &self.seg,
            &self.cen,
            &self.off_x,
            &self.off_y,
            &self.flow_x,
            &self.flow_y,
            &self.intent,
        ]
    }

    pub fn clear_flow(&mut self) {
        self.flow_x.cells_mut().fill(0.0);
        self.flow_y.cells_mut().fill(0.0);
    }

    /// Zeroes segmentation, centerness and offsets.
    pub fn clear_motion(&mut self) {
        for g in [
            &mut self.seg,
            &mut self.cen,
            &mut self.off_x,
            &mut self.off_y,
        ] {
            g.cells_mut().fill(0.0);
        }
    }

    pub(crate) fn check_shape(&self) -> Result<()> {
        for p in &self.planes()[1..] {
            self.seg.check_same_spec(p)?;
        }
        Ok(())
    }
}

/// Rasterizes every agent's footprint, centerness, center offsets and one-frame
/// flow at `frame`, plus a constant plane for `intent`.
pub fn rasterize_motion_features(
    scenario: &Scenario,
    frame: usize,
    spec: &GridSpec,
    intent: DrivingIntent,
) -> Result<MotionFeatureStack> {
    spec.validate()?;
    scenario.check_frame(frame)?;
    scenario.check_frame(frame + 1)?;
    let cs = spec.cell_size;
    let mut f = MotionFeatureStack::zeros(*spec);
    f.intent.cells_mut().fill(intent.ordinal() as f64 / 4.0);

    for agent in &scenario.agents {
        let (Some(now), Some(next)) = (agent.footprint_at(frame), agent.footprint_at(frame + 1))
        else {
            return Err(Error::AgentNotFound { id: agent.id });
        };
        let radius = now.half_diagonal();
        let flow = (next.center - now.center) * (1.0 / cs);
        let mut cells = spec.rasterize_box(&now);
        let center_cell = spec.world_to_cell(now.center);
        if let Some(c) = center_cell {
            if !cells.contains(&c) {
                cells.push(c);
            }
        }
        for c in cells {
            let p = spec.cell_center(c);
            let cen = if Some(c) == center_cell {
                1.0
            } else {
                (1.0 - p.distance(now.center) / radius).max(0.0)
            };
            f.seg.set(c, 1.0);
            let slot = f.cen.get_mut(c);
            *slot = slot.max(cen);
            let off = (now.center - p) * (1.0 / cs);
            f.off_x.set(c, off.x);
            f.off_y.set(c, off.y);
            f.flow_x.set(c, flow.x);
            f.flow_y.set(c, flow.y);
        }
    }
    Ok(f)
}

/// Cells beyond this many cells from a splat receive nothing.
const SPLAT_REACH: i64 = 3;

/// Supervision heatmap: each target's relevance is stamped on its footprint at
/// `frame` and at each of its next `horizon` waypoints, falling off as
/// `exp(-d² / 2)` with `d` the distance in cells to the stamped footprint.
/// Cells take the maximum over all stamps.
pub fn render_gt_heatmap(
    scenario: &Scenario,
    frame: usize,
    relevances: &[RelevanceReport],
    spec: &GridSpec,
    horizon: usize,
) -> Result<Heatmap> {
    spec.validate()?;
    scenario.check_frame(frame)?;
    let by_id: BTreeMap<u32, f64> = relevances
        .iter()
        .map(|r| (r.target_id, r.relevance))
        .collect();
    for r in relevances {
        if scenario.agent(r.target_id).is_none() || r.target_id == scenario.ego_id {
            return Err(Error::AgentNotFound { id: r.target_id });
        }
    }
    let mut out = Heatmap::filled(*spec, 0.0);
    for agent in scenario.others() {
        let value = *by_id
            .get(&agent.id)
            .ok_or_else(|| Error::InvalidInput(format!("no relevance for agent {}", agent.id)))?;
        let value = if value.is_finite() {
            value.clamp(0.0, 1.0)
        } else {
            0.0
        };
        if value <= 0.0 {
            continue;
        }
        for f in frame..=frame + horizon {
            if let Some(fp) = agent.footprint_at(f) {
                splat(&mut out, &spec.rasterize_box(&fp), value);
            }
        }
    }
    Ok(out)
}

fn splat(out: &mut Heatmap, footprint: &[CellIndex], value: f64) {
    if footprint.is_empty() {
        return;
    }
    let (rows, cols) = (out.rows() as i64, out.cols() as i64);
    let r0 = footprint.iter().map(|c| c.row as i64).min().unwrap_or(0) - SPLAT_REACH;
    let r1 = footprint.iter().map(|c| c.row as i64).max().unwrap_or(0) + SPLAT_REACH;
    let c0 = footprint.iter().map(|c| c.col as i64).min().unwrap_or(0) - SPLAT_REACH;
    let c1 = footprint.iter().map(|c| c.col as i64).max().unwrap_or(0) + SPLAT_REACH;
    for row in r0.max(0)..=r1.min(rows - 1) {
        for col in c0.max(0)..=c1.min(cols - 1) {
            let d2 = footprint
                .iter()
                .map(|c| {
                    let (dr, dc) = (c.row as i64 - row, c.col as i64 - col);
                    dr * dr + dc * dc
                })
                .min()
                .unwrap_or(i64::MAX);
            if d2 > SPLAT_REACH * SPLAT_REACH {
                continue;
            }
            let v = value * (-(d2 as f64) / 2.0).exp();
            let cell = out.get_mut(CellIndex::new(row as usize, col as usize));
            *cell = cell.max(v).min(1.0);
        }
    }
}
