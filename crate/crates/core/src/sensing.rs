//! Occlusion-aware BEV occupancy rendering by 2D ray casting.
//!
//! Each ray marches in half-cell steps, marks every traversed cell visible and
//! records one hit on the first blocking cell before stopping. The ego sensor is
//! blocked by other agents and static obstacles; the elevated infrastructure
//! sensor is blocked by agents only.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::grid::{CellMask, Grid, GridSpec, OccupancyGrid};
use crate::scenario::Scenario;

pub const DEFAULT_RAYS: usize = 720;
pub const DEFAULT_RANGE: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SensorKind {
    Ego,
    Infra,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub n_rays: usize,
    pub range: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            n_rays: DEFAULT_RAYS,
            range: DEFAULT_RANGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorView {
    /// Hit counts per cell.
    pub occupancy: OccupancyGrid,
    /// Cells reached by at least one ray.
    pub visible: CellMask,
    pub sensor_pose: Point2,
}

const FREE: u8 = 0;
const AGENT: u8 = 1;
const OBSTACLE: u8 = 2;

/// What blocks rays for `sensor` at `frame`.
fn blocking_raster(
    scenario: &Scenario,
    frame: usize,
    sensor: SensorKind,
    spec: &GridSpec,
    obstacles_block: bool,
) -> Grid<u8> {
    let mut raster = Grid::filled(*spec, FREE);
    if obstacles_block {
        for r in &scenario.static_obstacles {
            for c in spec.rasterize_rect(r) {
                raster.set(c, OBSTACLE);
            }
        }
    }
    for a in &scenario.agents {
        if sensor == SensorKind::Ego && a.id == scenario.ego_id {
            continue;
        }
        if let Some(fp) = a.footprint_at(frame) {
            for c in spec.rasterize_box(&fp) {
                raster.set(c, AGENT);
            }
        }
    }
    raster
}

/// Renders the view of `sensor` with the default range.
pub fn render_view(
    scenario: &Scenario,
    frame: usize,
    sensor: SensorKind,
    spec: &GridSpec,
    n_rays: usize,
) -> Result<SensorView> {
    render_view_with(
        scenario,
        frame,
        sensor,
        spec,
        &SensorConfig {
            n_rays,
            range: DEFAULT_RANGE,
        },
    )
}

pub fn render_view_with(
    scenario: &Scenario,
    frame: usize,
    sensor: SensorKind,
    spec: &GridSpec,
    cfg: &SensorConfig,
) -> Result<SensorView> {
    render_inner(
        scenario,
        frame,
        sensor,
        spec,
        cfg,
        sensor == SensorKind::Ego,
    )
}

fn render_inner(
    scenario: &Scenario,
    frame: usize,
    sensor: SensorKind,
    spec: &GridSpec,
    cfg: &SensorConfig,
    obstacles_block: bool,
) -> Result<SensorView> {
    scenario.check_frame(frame)?;
    if cfg.n_rays < 8 {
        return Err(Error::param(
            "n_rays",
            format!("need at least 8, got {}", cfg.n_rays),
        ));
    }
    if !(cfg.range > 0.0) {
        return Err(Error::param("range", "must be positive"));
    }
    spec.validate()?;
    let origin = match sensor {
        SensorKind::Ego => scenario
            .ego()
            .position_at(frame)
            .ok_or(Error::AgentNotFound {
                id: scenario.ego_id,
            })?,
        SensorKind::Infra => scenario.infra_pose.position(),
    };
    let raster = blocking_raster(scenario, frame, sensor, spec, obstacles_block);
    let mut occupancy = OccupancyGrid::filled(*spec, 0);
    let mut visible = CellMask::filled(*spec, false);
    let step = 0.5 * spec.cell_size;
    let n_steps = (cfg.range / step).floor() as usize;

    for i in 0..cfg.n_rays {
        let dir = Point2::from_angle(TAU * i as f64 / cfg.n_rays as f64);
        for k in 0..=n_steps {
            let Some(cell) = spec.world_to_cell(origin + dir * (k as f64 * step)) else {
                break;
            };
            visible.set(cell, true);
            if *raster.get(cell) != FREE {
                *occupancy.get_mut(cell) += 1;
                break;
            }
        }
    }
    Ok(SensorView {
        occupancy,
        visible,
        sensor_pose: origin,
    })
}

/// Sums per-frame occupancies after aligning them to the latest frame.
///
/// Views are rendered on world-anchored grids, so the alignment is the identity
/// and the result is the cellwise sum.
pub fn accumulate_temporal(views: &[SensorView]) -> Result<OccupancyGrid> {
    let (last, rest) = views
        .split_last()
        .ok_or_else(|| Error::InvalidInput("accumulate_temporal needs at least one view".into()))?;
    let mut acc = last.occupancy.clone();
    for v in rest {
        acc.check_same_spec(&v.occupancy)?;
        for (a, b) in acc.cells_mut().iter_mut().zip(v.occupancy.cells()) {
            *a += *b;
        }
    }
    Ok(acc)
}
