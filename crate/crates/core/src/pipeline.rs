//! End-to-end cooperative perception runs over scenario suites.
//!
//! For every evaluated frame: render the ego and infrastructure views, score
//! every target, render the supervision heatmap, obtain the predicted heatmap,
//! select cells per the mask policy, blockify, transmit, fuse, detect and match.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comm::{
    blockify, build_mask, comm_volume, transmit, ChannelModel, CommStats, FeatureBlockSet,
    DEFAULT_BLOCK_SIZE, DEFAULT_BYTES_PER_CELL, DEFAULT_HEADER_BYTES, DEFAULT_TAU,
};
use crate::error::{Error, Result};
use crate::fusion::{
    detect, fuse, gt_boxes, match_detections, write_detections_csv, DetectionBox, GtBox,
    DEFAULT_MATCH_IOU, DEFAULT_MIN_CELLS, DEFAULT_MIN_COUNT, DETECTIONS_CSV_HEADER,
};
use crate::geometry::Point2;
use crate::grid::{write_file, CellIndex, CellMask, GridSpec, Heatmap, OccupancyGrid};
use crate::idapm::{
    load_weights, predict_heatmap, rasterize_motion_features, render_gt_heatmap, synthetic_batch,
    train_predictor, Predictor, TrainOptions,
};
use crate::loss::LossParams;
use crate::metrics::{
    average_precision, corr_miou, critical_counts, iou_error, recall_ratio, EvalReport,
    FrameReport, RankedDetection, DEFAULT_CRITICAL_THRESHOLD,
};
use crate::ptcm::{relevance_all, Branches, PtcmParams, RelevanceReport};
use crate::scenario::{generate_scenario, load_scenario, Scenario, Template};
use crate::sensing::{accumulate_temporal, render_view, SensorKind, SensorView, DEFAULT_RAYS};

/// Which infrastructure cells are offered for transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// Cells whose predicted relevance reaches τ.
    RiskIntent,
    /// Cells whose normalized infrastructure occupancy reaches τ.
    Visibility,
    Full,
    None,
}

impl MaskPolicy {
    pub const ALL: [MaskPolicy; 4] = [Self::RiskIntent, Self::Visibility, Self::Full, Self::None];

    pub fn name(self) -> &'static str {
        match self {
            Self::RiskIntent => "risk-intent",
            Self::Visibility => "visibility",
            Self::Full => "full",
            Self::None => "none",
        }
    }
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "riskintent" | "risk" => Ok(Self::RiskIntent),
            "visibility" => Ok(Self::Visibility),
            "full" => Ok(Self::Full),
            "none" | "egoonly" => Ok(Self::None),
            _ => Err(Error::param("policy", format!("unknown mask policy `{s}`"))),
        }
    }
}

/// Where the predicted heatmap comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeatmapSource {
    /// The relevance-rendered heatmap itself.
    Analytic,
    /// The convolutional predictor applied to motion features.
    Trained,
}

impl FromStr for HeatmapSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "analytic" => Ok(Self::Analytic),
            "trained" => Ok(Self::Trained),
            _ => Err(Error::param(
                "heatmap",
                format!("unknown heatmap source `{s}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scenario files; when empty, `count` scenarios are generated from `template`.
    pub scenarios: Vec<PathBuf>,
    pub template: Template,
    pub seed: u64,
    pub count: usize,
    pub agents: usize,
    pub ptcm: PtcmParams,
    pub loss: LossParams,
    pub tau: f64,
    pub block_size: usize,
    pub bytes_per_cell: u64,
    pub header_bytes: u64,
    pub channel: ChannelModel,
    pub policy: MaskPolicy,
    pub heatmap: HeatmapSource,
    /// Predictor weights for `heatmap = "trained"`; trained on the synthetic batch when absent.
    pub weights: Option<PathBuf>,
    pub train_iters: usize,
    /// Infrastructure frames summed into the transmitted occupancy.
    pub temporal_window: usize,
    /// Smoothing of the visibility-baseline confidence map, in cells.
    pub visibility_sigma: f64,
    pub no_temporal: bool,
    pub no_motion: bool,
    pub no_velocity: bool,
    pub n_rays: usize,
    pub grid: GridSpec,
    pub min_cells: usize,
    pub min_count: u32,
    pub match_iou: f64,
    pub critical_threshold: f64,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenarios: Vec::new(),
            template: Template::OccludedCrossing,
            seed: 0,
            count: 20,
            agents: 4,
            ptcm: PtcmParams::default(),
            loss: LossParams::default(),
            tau: DEFAULT_TAU,
            block_size: DEFAULT_BLOCK_SIZE,
            bytes_per_cell: DEFAULT_BYTES_PER_CELL,
            header_bytes: DEFAULT_HEADER_BYTES,
            channel: ChannelModel::lossless(),
            policy: MaskPolicy::RiskIntent,
            heatmap: HeatmapSource::Analytic,
            weights: None,
            train_iters: 200,
            temporal_window: 1,
            visibility_sigma: 2.0,
            no_temporal: false,
            no_motion: false,
            no_velocity: false,
            n_rays: DEFAULT_RAYS,
            grid: GridSpec::default(),
            min_cells: DEFAULT_MIN_CELLS,
            min_count: DEFAULT_MIN_COUNT,
            match_iou: DEFAULT_MATCH_IOU,
            critical_threshold: DEFAULT_CRITICAL_THRESHOLD,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::param(
                "tau",
                format!("{} is outside [0, 1]", self.tau),
            ));
        }
        if self.scenarios.is_empty() && self.count == 0 {
            return Err(Error::param("count", "need at least one scenario"));
        }
        if self.block_size == 0 {
            return Err(Error::param("block_size", "must be positive"));
        }
        if self.temporal_window == 0 {
            return Err(Error::param("temporal_window", "must be at least 1"));
        }
        if !(self.visibility_sigma >= 0.0 && self.visibility_sigma.is_finite()) {
            return Err(Error::param(
                "visibility_sigma",
                "must be finite and non-negative",
            ));
        }
        if !(self.match_iou > 0.0 && self.match_iou < 1.0) {
            return Err(Error::param("match_iou", "must lie in (0, 1)"));
        }
        if !(self.critical_threshold > 0.0 && self.critical_threshold < 1.0) {
            return Err(Error::param("critical_threshold", "must lie in (0, 1)"));
        }
        self.grid.validate()?;
        self.ptcm.validate()?;
        self.loss.validate()?;
        self.channel.validate()
    }

    fn effective_window(&self) -> usize {
        if self.no_temporal {
            1
        } else {
            self.temporal_window
        }
    }

    /// Loads or generates the scenario suite in index order.
    pub fn load_suite(&self) -> Result<Vec<Scenario>> {
        if !self.scenarios.is_empty() {
            return self.scenarios.iter().map(load_scenario).collect();
        }
        (0..self.count)
            .map(|i| {
                generate_scenario(self.template, self.seed.wrapping_add(i as u64), self.agents)
            })
            .collect()
    }
}

/// Everything computed for one frame.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub frame: usize,
    pub ego_view: SensorView,
    pub infra_view: SensorView,
    /// Infrastructure occupancy summed over the temporal window.
    pub infra_occupancy: OccupancyGrid,
    /// Full-branch relevances, used for supervision and criticality.
    pub relevances: Vec<RelevanceReport>,
    pub gt_heatmap: Heatmap,
    pub pred_heatmap: Heatmap,
    pub mask: CellMask,
    pub offered: FeatureBlockSet,
    pub received: FeatureBlockSet,
    pub fused: OccupancyGrid,
    pub detections: Vec<DetectionBox>,
    pub gt: Vec<GtBox>,
    pub stats: CommStats,
}

/// Frames with one frame of history and a full prediction horizon ahead.
pub fn evaluated_frames(
    scenario: &Scenario,
    horizon: usize,
) -> Result<std::ops::RangeInclusive<usize>> {
    let last = scenario.frames.saturating_sub(1 + horizon);
    if last < 1 {
        return Err(Error::HorizonTooShort {
            needed: horizon + 2,
            available: scenario.frames.saturating_sub(1),
        });
    }
    Ok(1..=last)
}

/// Visibility confidence: infrastructure occupancy smoothed with a Gaussian of
/// `sigma` cells (truncated at 3σ) and scaled so its maximum is 1. `sigma = 0`
/// leaves the occupancy unsmoothed.
pub fn visibility_heatmap(occupancy: &OccupancyGrid, sigma: f64) -> Heatmap {
    let raw = occupancy.map(|&v| v as f64);
    let smooth = if sigma > 0.0 {
        let reach = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-reach..=reach)
            .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let pass = |g: &Heatmap, along_rows: bool| {
            Heatmap::from_fn(*g.spec(), |c| {
                let (pos, len) = if along_rows {
                    (c.col, g.cols())
                } else {
                    (c.row, g.rows())
                };
                let mut acc = 0.0;
                for (i, w) in kernel.iter().enumerate() {
                    let q = pos as isize + i as isize - reach;
                    if q < 0 || q >= len as isize {
                        continue;
                    }
                    let cell = if along_rows {
                        CellIndex::new(c.row, q as usize)
                    } else {
                        CellIndex::new(q as usize, c.col)
                    };
                    acc += w * g.get(cell);
                }
                acc
            })
        };
        pass(&pass(&raw, true), false)
    } else {
        raw
    };
    let max = smooth.cells().iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        smooth.map(|&v| (v / max).clamp(0.0, 1.0))
    } else {
        smooth.map(|_| 0.0)
    }
}

fn channel_for(cfg: &RunConfig, scenario: usize, frame: usize) -> ChannelModel {
    let salt = (scenario as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (frame as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    ChannelModel {
        drop_probability: cfg.channel.drop_probability,
        seed: cfg.channel.seed ^ salt,
    }
}

/// Runs one frame of one scenario.
pub fn run_frame(
    cfg: &RunConfig,
    scenario: &Scenario,
    scenario_index: usize,
    frame: usize,
    model: Option<&Predictor>,
) -> Result<FrameOutput> {
    let spec = cfg.grid;
    let ego_view = render_view(scenario, frame, SensorKind::Ego, &spec, cfg.n_rays)?;
    let window = cfg.effective_window();
    let first = (frame + 1).saturating_sub(window);
    let infra_views = (first..=frame)
        .map(|f| render_view(scenario, f, SensorKind::Infra, &spec, cfg.n_rays))
        .collect::<Result<Vec<_>>>()?;
    let infra_occupancy = accumulate_temporal(&infra_views)?;
    let infra_view = infra_views
        .last()
        .cloned()
        .ok_or_else(|| Error::InvalidInput("empty window".into()))?;

    let relevances = relevance_all(scenario, frame, &cfg.ptcm, Branches::default())?;
    let gt_heatmap = render_gt_heatmap(scenario, frame, &relevances, &spec, cfg.ptcm.horizon)?;
    let pred_heatmap = match (cfg.heatmap, model) {
        (HeatmapSource::Trained, Some(m)) => {
            let mut feats = rasterize_motion_features(scenario, frame, &spec, scenario.ego_intent)?;
            if cfg.no_temporal {
                feats.clear_flow();
            }
            if cfg.no_motion {
                feats.clear_motion();
            }
            predict_heatmap(m, &feats)?
        }
        (HeatmapSource::Trained, None) => {
            return Err(Error::InvalidInput(
                "trained heatmap requested without a predictor".into(),
            ));
        }
        (HeatmapSource::Analytic, _) if cfg.no_velocity => {
            let branches = Branches {
                trajectory: true,
                velocity: false,
            };
            let rel = relevance_all(scenario, frame, &cfg.ptcm, branches)?;
            render_gt_heatmap(scenario, frame, &rel, &spec, cfg.ptcm.horizon)?
        }
        (HeatmapSource::Analytic, _) => gt_heatmap.clone(),
    };

    let mask = match cfg.policy {
        MaskPolicy::RiskIntent => build_mask(&pred_heatmap, cfg.tau),
        MaskPolicy::Visibility => build_mask(
            &visibility_heatmap(&infra_occupancy, cfg.visibility_sigma),
            cfg.tau,
        ),
        MaskPolicy::Full => CellMask::filled(spec, true),
        MaskPolicy::None => CellMask::filled(spec, false),
    };
    let offered = blockify(&mask, &infra_occupancy, cfg.block_size)?;
    let stats = comm_volume(&offered, cfg.bytes_per_cell, cfg.header_bytes);
    let received = transmit(&offered, &channel_for(cfg, scenario_index, frame))?;
    let fused = fuse(&ego_view, &received)?;

    let ego_pos = scenario
        .ego()
        .position_at(frame)
        .ok_or(Error::AgentNotFound {
            id: scenario.ego_id,
        })?;
    let boxes: Vec<DetectionBox> = detect(&fused, cfg.min_cells, cfg.min_count)
        .into_iter()
        .filter(|d| !d.rect().contains(ego_pos))
        .collect();
    let gt = gt_boxes(scenario, frame, &spec);
    let detections = match_detections(&boxes, &gt, cfg.match_iou);

    Ok(FrameOutput {
        frame,
        ego_view,
        infra_view,
        infra_occupancy,
        relevances,
        gt_heatmap,
        pred_heatmap,
        mask,
        offered,
        received,
        fused,
        detections,
        gt,
        stats,
    })
}

/// Per-frame images and detections kept for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameArtifacts {
    pub scenario: usize,
    pub frame: usize,
    pub gt_pgm: Vec<u8>,
    pub pred_pgm: Vec<u8>,
    pub detections_pgm: Vec<u8>,
    pub detections: Vec<DetectionBox>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: EvalReport,
    pub artifacts: Vec<FrameArtifacts>,
    /// Names of violated run invariants; empty on a clean run.
    pub violations: Vec<String>,
}

/// Fused occupancy in gray with detection outlines in white.
fn detections_image(fused: &OccupancyGrid, detections: &[DetectionBox]) -> Vec<u8> {
    let max = fused.max_count().max(1) as f64;
    let mut img = fused.map(|&v| {
        if v == 0 {
            0u8
        } else {
            (64.0 + 127.0 * v as f64 / max) as u8
        }
    });
    let spec = *fused.spec();
    for d in detections {
        let r = d.rect();
        let half = 0.5 * spec.cell_size;
        let corners = [
            spec.world_to_cell(Point2::new(r.x_min + half, r.y_min + half)),
            spec.world_to_cell(Point2::new(r.x_max - half, r.y_max - half)),
        ];
        if let [Some(a), Some(b)] = corners {
            for row in a.row..=b.row {
                for col in a.col..=b.col {
                    if row == a.row || row == b.row || col == a.col || col == b.col {
                        img.set(CellIndex::new(row, col), 255);
                    }
                }
            }
        }
    }
    img.to_pgm(|&v| v)
}

fn check_frame_invariants(
    cfg: &RunConfig,
    out: &FrameOutput,
    tag: &str,
    violations: &mut Vec<String>,
) {
    let mut fail = |name: &str| violations.push(format!("{tag}: {name}"));
    if !(0.0..=100.0).contains(&out.stats.percent_of_full) {
        fail("percent_of_full outside [0, 100]");
    }
    if !out.mask.is_subset_of(&out.offered.coverage()) {
        fail("offered blocks do not cover the mask");
    }
    let cover = out.received.coverage();
    let local = out
        .fused
        .cells()
        .iter()
        .zip(out.ego_view.occupancy.cells())
        .zip(cover.cells())
        .all(|((&f, &e), &c)| c || f == e);
    if !local {
        fail("fused cells outside received blocks differ from the ego view");
    }
    match cfg.policy {
        MaskPolicy::Full if out.stats.percent_of_full != 100.0 => {
            fail("full policy sent less than the whole grid")
        }
        MaskPolicy::None if out.stats.cells_sent != 0 => fail("ego-only policy sent cells"),
        _ => {}
    }
    let unit = |h: &Heatmap| h.cells().iter().all(|v| (0.0..=1.0).contains(v));
    if !unit(&out.gt_heatmap) || !unit(&out.pred_heatmap) {
        fail("heatmap value outside [0, 1]");
    }
}

struct ScenarioResult {
    frames: Vec<FrameReport>,
    ranked: Vec<RankedDetection>,
    gt_count: usize,
    artifacts: Vec<FrameArtifacts>,
    violations: Vec<String>,
}

fn run_scenario(
    cfg: &RunConfig,
    scenario: &Scenario,
    index: usize,
    model: Option<&Predictor>,
) -> Result<ScenarioResult> {
    let mut res = ScenarioResult {
        frames: Vec::new(),
        ranked: Vec::new(),
        gt_count: 0,
        artifacts: Vec::new(),
        violations: Vec::new(),
    };
    for frame in evaluated_frames(scenario, cfg.ptcm.horizon)? {
        let out = run_frame(cfg, scenario, index, frame, model)?;
        check_frame_invariants(
            cfg,
            &out,
            &format!("scenario {index} frame {frame}"),
            &mut res.violations,
        );
        let matched: BTreeSet<u32> = out.detections.iter().filter_map(|d| d.matched_gt).collect();
        let visible_gt: BTreeSet<u32> = out.gt.iter().map(|g| g.agent_id).collect();
        let critical_rel: Vec<RelevanceReport> = out
            .relevances
            .iter()
            .filter(|r| visible_gt.contains(&r.target_id))
            .copied()
            .collect();
        let (critical, critical_matched) =
            critical_counts(&matched, &critical_rel, cfg.critical_threshold);
        res.frames.push(FrameReport {
            scenario: index,
            frame,
            corr_miou: corr_miou(&out.pred_heatmap, &out.gt_heatmap, cfg.tau)?,
            iou_error: iou_error(&out.pred_heatmap, &out.gt_heatmap, cfg.tau)?,
            detections: out.detections.len(),
            matched: matched.len(),
            gt_agents: out.gt.len(),
            critical,
            critical_matched,
            comm: out.stats,
        });
        res.ranked
            .extend(out.detections.iter().map(|d| RankedDetection {
                confidence: d.confidence,
                matched: d.matched_gt.is_some(),
            }));
        res.gt_count += out.gt.len();
        res.artifacts.push(FrameArtifacts {
            scenario: index,
            frame,
            gt_pgm: out.gt_heatmap.heatmap_pgm(),
            pred_pgm: out.pred_heatmap.heatmap_pgm(),
            detections_pgm: detections_image(&out.fused, &out.detections),
            detections: out.detections,
        });
    }
    Ok(res)
}

/// Loads or trains the predictor the config asks for.
pub fn prepare_model(cfg: &RunConfig) -> Result<Option<Predictor>> {
    if cfg.heatmap != HeatmapSource::Trained {
        return Ok(None);
    }
    if let Some(path) = &cfg.weights {
        return load_weights(path).map(Some);
    }
    let batch = synthetic_batch(cfg.seed)?;
    let opts = TrainOptions {
        iters: cfg.train_iters,
        seed: cfg.seed,
        ..TrainOptions::default()
    };
    Ok(Some(train_predictor(&batch, &cfg.loss, &opts)?.model))
}

pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let suite = cfg.load_suite()?;
    let model = prepare_model(cfg)?;
    run_suite(cfg, &suite, model.as_ref())
}

/// Runs a pre-loaded suite; scenarios run in parallel and are reduced in index order.
pub fn run_suite(
    cfg: &RunConfig,
    suite: &[Scenario],
    model: Option<&Predictor>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let results = suite
        .par_iter()
        .enumerate()
        .map(|(i, s)| run_scenario(cfg, s, i, model))
        .collect::<Result<Vec<_>>>()?;

    let mut frames = Vec::new();
    let mut ranked = Vec::new();
    let mut artifacts = Vec::new();
    let mut violations = Vec::new();
    let mut gt_count = 0;
    for r in results {
        frames.extend(r.frames);
        ranked.extend(r.ranked);
        artifacts.extend(r.artifacts);
        violations.extend(r.violations);
        gt_count += r.gt_count;
    }
    let n = frames.len().max(1) as f64;
    let (critical, hit) = frames
        .iter()
        .fold((0, 0), |(c, h), f| (c + f.critical, h + f.critical_matched));
    let report = EvalReport {
        corr_miou: frames.iter().map(|f| f.corr_miou).sum::<f64>() / n,
        iou_error: frames.iter().map(|f| f.iou_error).sum::<f64>() / n,
        ap: average_precision(&ranked, gt_count),
        critical_recall: recall_ratio(hit, critical),
        comm: CommStats::aggregate(frames.iter().map(|f| &f.comm)),
        frames,
    };
    Ok(RunOutput {
        report,
        artifacts,
        violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub comm_percent: f64,
    pub bytes_sent: u64,
    pub ap: f64,
    pub critical_recall: f64,
    pub corr_miou: f64,
    pub iou_error: f64,
}

pub const SWEEP_CSV_HEADER: &str =
    "policy,tau,comm_percent,bytes_sent,ap,critical_recall,corr_miou,iou_error";

/// One run per τ, in the order given. Also reports whether the comm column is
/// non-increasing over ascending τ.
pub fn sweep(cfg: &RunConfig, taus: &[f64]) -> Result<(Vec<SweepRow>, Vec<String>)> {
    if taus.is_empty() {
        return Err(Error::param("taus", "need at least one threshold"));
    }
    let suite = cfg.load_suite()?;
    let model = prepare_model(cfg)?;
    let mut rows = Vec::with_capacity(taus.len());
    let mut violations = Vec::new();
    for &tau in taus {
        // thresholds above 1 select nothing, which is a useful sweep end point
        let run_cfg = RunConfig {
            tau: tau.min(1.0),
            ..cfg.clone()
        };
        let out = if tau > 1.0 && cfg.policy != MaskPolicy::Full {
            run_suite(
                &RunConfig {
                    policy: MaskPolicy::None,
                    ..run_cfg
                },
                &suite,
                model.as_ref(),
            )?
        } else {
            run_suite(&run_cfg, &suite, model.as_ref())?
        };
        violations.extend(
            out.violations
                .into_iter()
                .map(|v| format!("tau {tau}: {v}")),
        );
        let r = out.report;
        rows.push(SweepRow {
            tau,
            comm_percent: r.comm.percent_of_full,
            bytes_sent: r.comm.bytes_sent,
            ap: r.ap,
            critical_recall: r.critical_recall,
            corr_miou: r.corr_miou,
            iou_error: r.iou_error,
        });
    }
    let mut sorted = rows.clone();
    sorted.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    if sorted
        .windows(2)
        .any(|w| w[1].comm_percent > w[0].comm_percent)
    {
        violations.push("comm percent increases with tau".into());
    }
    Ok((rows, violations))
}

pub fn write_sweep_csv(
    mut w: impl Write,
    policy: MaskPolicy,
    rows: &[SweepRow],
) -> std::io::Result<()> {
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{policy},{},{:.6},{},{:.6},{:.6},{:.4},{:.4}",
            r.tau, r.comm_percent, r.bytes_sent, r.ap, r.critical_recall, r.corr_miou, r.iou_error
        )?;
    }
    Ok(())
}

/// Finds the τ at which `cfg.policy` sends closest to `target_cells` over the
/// suite, by bisection on the non-increasing cells-sent curve.
pub fn tune_tau_for_budget(
    cfg: &RunConfig,
    suite: &[Scenario],
    model: Option<&Predictor>,
    target_cells: u64,
) -> Result<(f64, RunOutput)> {
    let eval = |tau: f64| run_suite(&RunConfig { tau, ..cfg.clone() }, suite, model);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut best = (0.0, eval(0.0)?);
    let gap =
        |o: &RunOutput| (o.report.comm.cells_sent as i64 - target_cells as i64).unsigned_abs();
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let out = eval(mid)?;
        let sent = out.report.comm.cells_sent;
        if gap(&out) < gap(&best.1) {
            best = (mid, out);
        }
        if sent > target_cells {
            lo = mid;
        } else if sent < target_cells {
            hi = mid;
        } else {
            break;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    Ok(best)
}

pub const SUMMARY_CSV_HEADER: &str =
    "policy,tau,frames,comm_percent,cells_sent,bytes_sent,volume_log2,ap,critical_recall,corr_miou,iou_error";
pub const FRAMES_CSV_HEADER: &str =
    "scenario,frame,comm_percent,cells_sent,bytes_sent,detections,matched,gt_agents,critical,critical_matched,corr_miou,iou_error";

fn fmt_log2(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Writes `summary.csv`, `frames.csv`, `detections.csv`, `summary.txt` and
/// three images per frame under `out_dir`.
pub fn report(cfg: &RunConfig, out: &RunOutput, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let r = &out.report;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: &[u8]| -> Result<()> {
        let p = out_dir.join(name);
        write_file(&p, bytes)?;
        written.push(p);
        Ok(())
    };

    let summary = format!(
        "{SUMMARY_CSV_HEADER}\n{},{},{},{:.6},{},{},{},{:.6},{:.6},{:.4},{:.4}\n",
        cfg.policy,
        cfg.tau,
        r.frames.len(),
        r.comm.percent_of_full,
        r.comm.cells_sent,
        r.comm.bytes_sent,
        fmt_log2(r.comm.volume_log2),
        r.ap,
        r.critical_recall,
        r.corr_miou,
        r.iou_error
    );
    put("summary.csv".into(), summary.as_bytes())?;

    let mut frames = format!("{FRAMES_CSV_HEADER}\n");
    for f in &r.frames {
        frames.push_str(&format!(
            "{},{},{:.6},{},{},{},{},{},{},{},{:.4},{:.4}\n",
            f.scenario,
            f.frame,
            f.comm.percent_of_full,
            f.comm.cells_sent,
            f.comm.bytes_sent,
            f.detections,
            f.matched,
            f.gt_agents,
            f.critical,
            f.critical_matched,
            f.corr_miou,
            f.iou_error
        ));
    }
    put("frames.csv".into(), frames.as_bytes())?;

    let mut dets = Vec::new();
    writeln!(dets, "scenario,{DETECTIONS_CSV_HEADER}").map_err(|e| Error::io(out_dir, e))?;
    for a in &out.artifacts {
        let mut rows = Vec::new();
        write_detections_csv(&mut rows, a.frame, &a.detections)
            .map_err(|e| Error::io(out_dir, e))?;
        for line in String::from_utf8_lossy(&rows).lines() {
            writeln!(dets, "{},{line}", a.scenario).map_err(|e| Error::io(out_dir, e))?;
        }
    }
    put("detections.csv".into(), &dets)?;

    put("summary.txt".into(), summary_table(cfg, r).as_bytes())?;

    for a in &out.artifacts {
        let stem = format!("s{:03}_f{:03}", a.scenario, a.frame);
        put(format!("images/{stem}_gt.pgm"), &a.gt_pgm)?;
        put(format!("images/{stem}_pred.pgm"), &a.pred_pgm)?;
        put(format!("images/{stem}_det.pgm"), &a.detections_pgm)?;
    }
    Ok(written)
}

/// Human-readable summary.
pub fn summary_table(cfg: &RunConfig, r: &EvalReport) -> String {
    let rows = [
        ("policy", cfg.policy.to_string()),
        ("tau", format!("{}", cfg.tau)),
        ("frames", r.frames.len().to_string()),
        ("comm %", format!("{:.4}", r.comm.percent_of_full)),
        ("cells sent", r.comm.cells_sent.to_string()),
        ("bytes sent", r.comm.bytes_sent.to_string()),
        ("volume log2 (bits/frame)", fmt_log2(r.comm.volume_log2)),
        ("AP (11-point)", format!("{:.4}", r.ap)),
        ("critical recall", format!("{:.4}", r.critical_recall)),
        ("corr-mIoU %", format!("{:.2}", r.corr_miou)),
        ("IoU-error %", format!("{:.2}", r.iou_error)),
    ];
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter()
        .map(|(k, v)| format!("{k:<width$}  {v}\n"))
        .collect()
}
