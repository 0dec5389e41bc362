//! Synthetic traffic scenes: agents with kinematic trajectories, an ego vehicle
//! with a declared driving intent, an infrastructure sensor and static obstacles.

mod generate;
mod io;
mod plan;

use serde::{Deserialize, Serialize};

pub use generate::{generate_scenario, generate_scenario_with, GenerateOptions, Template};
pub use io::{load_scenario, parse_scenario, save_scenario, scenario_to_string};
pub use plan::{plan_ego_trajectory, plan_motion};

use crate::error::{Error, Result};
use crate::geometry::{OrientedBox, Point2, Pose2, Rect, RigidTransform2D};

/// Current on-disk scenario schema.
pub const FORMAT_VERSION: u32 = 1;

/// Default prediction horizon in frames.
pub const DEFAULT_HORIZON: usize = 6;
/// Default seconds per frame.
pub const DEFAULT_DT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DrivingIntent {
    TurnLeft,
    TurnRight,
    GoStraight,
    Stop,
}

impl DrivingIntent {
    pub const ALL: [DrivingIntent; 4] = [
        DrivingIntent::TurnLeft,
        DrivingIntent::TurnRight,
        DrivingIntent::GoStraight,
        DrivingIntent::Stop,
    ];

    pub fn ordinal(self) -> usize {
        match self {
            DrivingIntent::TurnLeft => 0,
            DrivingIntent::TurnRight => 1,
            DrivingIntent::GoStraight => 2,
            DrivingIntent::Stop => 3,
        }
    }
}

impl std::str::FromStr for DrivingIntent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "turnleft" | "left" => Ok(DrivingIntent::TurnLeft),
            "turnright" | "right" => Ok(DrivingIntent::TurnRight),
            "gostraight" | "straight" => Ok(DrivingIntent::GoStraight),
            "stop" => Ok(DrivingIntent::Stop),
            _ => Err(Error::InvalidInput(format!("unknown driving intent `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentClass {
    Car,
    Truck,
    Pedestrian,
    Cyclist,
}

impl AgentClass {
    /// Nominal (length, width) in meters.
    pub fn footprint(self) -> (f64, f64) {
        match self {
            AgentClass::Car => (4.5, 1.8),
            AgentClass::Truck => (8.0, 2.5),
            AgentClass::Pedestrian => (0.6, 0.6),
            AgentClass::Cyclist => (1.8, 0.6),
        }
    }
}

/// One waypoint: position and heading at a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub frame: u32,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Waypoint {
    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub waypoints: Vec<Waypoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn at(&self, frame: usize) -> Option<&Waypoint> {
        self.waypoints
            .binary_search_by_key(&(frame as u64), |w| w.frame as u64)
            .ok()
            .map(|i| &self.waypoints[i])
    }

    pub fn position(&self, frame: usize) -> Option<Point2> {
        self.at(frame).map(Waypoint::position)
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.waypoints.last().map(|w| w.frame as usize)
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::ScenarioInvariant {
                field: format!("{field}.dt"),
                reason: format!("must be positive, got {}", self.dt),
            });
        }
        for (i, w) in self.waypoints.iter().enumerate() {
            if !(w.x.is_finite() && w.y.is_finite() && w.heading.is_finite()) {
                return Err(Error::ScenarioInvariant {
                    field: format!("{field}.waypoints[{i}]"),
                    reason: "non-finite value".into(),
                });
            }
            if i > 0 && w.frame <= self.waypoints[i - 1].frame {
                return Err(Error::ScenarioInvariant {
                    field: format!("{field}.waypoints[{i}].frame"),
                    reason: format!(
                        "frame indices must strictly increase ({} after {})",
                        w.frame,
                        self.waypoints[i - 1].frame
                    ),
                });
            }
        }
        Ok(())
    }
}

/// An agent's static attributes and frame-0 state, plus its full trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: u32,
    pub class: AgentClass,
    pub length: f64,
    pub width: f64,
    pub pose: Pose2,
    pub speed: f64,
    pub trajectory: Trajectory,
}

impl Agent {
    pub fn position_at(&self, frame: usize) -> Option<Point2> {
        self.trajectory.position(frame)
    }

    pub fn footprint_at(&self, frame: usize) -> Option<OrientedBox> {
        self.trajectory.at(frame).map(|w| OrientedBox {
            center: w.position(),
            heading: w.heading,
            length: self.length,
            width: self.width,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub format_version: u32,
    #[serde(default)]
    pub template: Option<String>,
    pub seed: u64,
    pub frames: usize,
    pub ego_id: u32,
    pub ego_intent: DrivingIntent,
    /// Infrastructure sensor pose; its transform maps infrastructure to world coordinates.
    pub infra_pose: Pose2,
    pub static_obstacles: Vec<Rect>,
    pub agents: Vec<Agent>,
}

impl Scenario {
    pub fn agent(&self, id: u32) -> Option<&Agent> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn ego(&self) -> &Agent {
        self.agent(self.ego_id)
            .expect("validated scenario contains its ego")
    }

    pub fn others(&self) -> impl Iterator<Item = &Agent> + '_ {
        self.agents.iter().filter(move |a| a.id != self.ego_id)
    }

    pub fn infra_to_world(&self) -> RigidTransform2D {
        self.infra_pose.to_transform()
    }

    pub fn check_frame(&self, frame: usize) -> Result<()> {
        if frame >= self.frames {
            return Err(Error::FrameOutOfRange {
                frame,
                frames: self.frames,
            });
        }
        Ok(())
    }

    /// Checks every structural invariant, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: String, reason: String| Err(Error::ScenarioInvariant { field, reason });
        if self.format_version != FORMAT_VERSION {
            return bad(
                "format_version".into(),
                format!(
                    "unsupported version {} (expected {FORMAT_VERSION})",
                    self.format_version
                ),
            );
        }
        if self.frames == 0 {
            return bad("frames".into(), "must be at least 1".into());
        }
        if self.agent(self.ego_id).is_none() {
            return bad("ego_id".into(), format!("no agent with id {}", self.ego_id));
        }
        let p = &self.infra_pose;
        if !(p.x.is_finite() && p.y.is_finite() && p.heading.is_finite()) {
            return bad("infra_pose".into(), "non-finite value".into());
        }
        for (i, r) in self.static_obstacles.iter().enumerate() {
            if !(r.x_min < r.x_max && r.y_min < r.y_max) {
                return bad(format!("static_obstacles[{i}]"), "empty rectangle".into());
            }
        }
        let mut ids = std::collections::BTreeSet::new();
        for (i, a) in self.agents.iter().enumerate() {
            let field = format!("agents[{i}]");
            if !ids.insert(a.id) {
                return bad(format!("{field}.id"), format!("duplicate id {}", a.id));
            }
            if !(a.length > 0.0 && a.width > 0.0) {
                return bad(
                    format!("{field}.length"),
                    "footprint must be positive".into(),
                );
            }
            if !(a.speed >= 0.0 && a.speed.is_finite()) {
                return bad(
                    format!("{field}.speed"),
                    format!("must be >= 0, got {}", a.speed),
                );
            }
            a.trajectory.validate(&format!("{field}.trajectory"))?;
            let spans = a.trajectory.len() == self.frames
                && a.trajectory.waypoints.first().map(|w| w.frame) == Some(0)
                && a.trajectory.last_frame() == Some(self.frames - 1);
            if !spans {
                return bad(
                    format!("{field}.trajectory"),
                    format!("must cover frames 0..{}", self.frames),
                );
            }
        }
        Ok(())
    }

    /// Applies one rigid motion to every pose, trajectory and the infrastructure
    /// frame. Obstacles become the bounding boxes of their moved corners.
    pub fn transformed(&self, g: &RigidTransform2D) -> Scenario {
        let dh = g.angle();
        let move_pose = |p: &Pose2| {
            let q = g.transform_point(p.position());
            Pose2::new(q.x, q.y, p.heading + dh)
        };
        let mut out = self.clone();
        out.infra_pose = move_pose(&self.infra_pose);
        out.static_obstacles = self
            .static_obstacles
            .iter()
            .map(|r| {
                let pts = [
                    Point2::new(r.x_min, r.y_min),
                    Point2::new(r.x_max, r.y_min),
                    Point2::new(r.x_max, r.y_max),
                    Point2::new(r.x_min, r.y_max),
                ]
                .map(|p| g.transform_point(p));
                let xs = pts.map(|p| p.x);
                let ys = pts.map(|p| p.y);
                Rect::new(
                    xs.iter().copied().fold(f64::MAX, f64::min),
                    ys.iter().copied().fold(f64::MAX, f64::min),
                    xs.iter().copied().fold(f64::MIN, f64::max),
                    ys.iter().copied().fold(f64::MIN, f64::max),
                )
            })
            .collect();
        for a in &mut out.agents {
            a.pose = move_pose(&a.pose);
            for w in &mut a.trajectory.waypoints {
                let q = move_pose(&Pose2::new(w.x, w.y, w.heading));
                w.x = q.x;
                w.y = q.y;
                w.heading = q.heading;
            }
        }
        out
    }
}
